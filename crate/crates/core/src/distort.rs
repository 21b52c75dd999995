//! Adversarial image distortions and the analytic bit-flip channel.
//!
//! Nine pixel-space distortions (random drop, random crop, resize round trip,
//! JPEG-style DCT quantization, brightness, Gaussian blur, Gaussian noise,
//! median blur, salt & pepper) plus an identity pass-through. Every
//! distortion maps [0,1] images to [0,1] images of the same shape; crop and
//! drop zero-fill so the extractor always sees fixed-shape input. Stochastic
//! kinds are bit-reproducible per seed, deterministic kinds ignore the seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::SignMask;
use crate::pipeline::Image;
use crate::rng::{mix_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    RandDrop,
    RandCrop,
    Resize,
    Jpeg,
    Bright,
    GausBlur,
    GausStd,
    MedBlur,
    SpNoise,
    Identity,
}

impl DistortionKind {
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            DistortionKind::RandDrop
                | DistortionKind::RandCrop
                | DistortionKind::GausStd
                | DistortionKind::SpNoise
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub param: f64,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, param: f64, seed: u64) -> Result<Self> {
        let ok = match kind {
            DistortionKind::RandDrop | DistortionKind::SpNoise => (0.0..=1.0).contains(&param),
            DistortionKind::RandCrop | DistortionKind::Resize => param > 0.0 && param <= 1.0,
            DistortionKind::Jpeg => (1.0..=100.0).contains(&param),
            DistortionKind::Bright | DistortionKind::GausStd => param >= 0.0,
            DistortionKind::GausBlur => param > 0.0,
            DistortionKind::MedBlur => {
                param >= 1.0 && param.fract() == 0.0 && (param as usize) % 2 == 1
            }
            DistortionKind::Identity => true,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "parameter {param} out of range for {kind:?}"
            )));
        }
        Ok(Self { kind, param, seed })
    }

    pub fn identity() -> Self {
        Self {
            kind: DistortionKind::Identity,
            param: 0.0,
            seed: 0,
        }
    }

    /// The nine standard adversarial settings: 80% drop, 60% crop, resize to
    /// 25% and restore, JPEG QF=25, brightness x6, Gaussian blur r=4,
    /// Gaussian noise sigma=0.05, median blur k=7, salt & pepper p=0.05.
    pub fn adversarial_suite(seed: u64) -> Vec<Self> {
        let entries = [
            (DistortionKind::RandDrop, 0.8),
            (DistortionKind::RandCrop, 0.6),
            (DistortionKind::Resize, 0.25),
            (DistortionKind::Jpeg, 25.0),
            (DistortionKind::Bright, 6.0),
            (DistortionKind::GausBlur, 4.0),
            (DistortionKind::GausStd, 0.05),
            (DistortionKind::MedBlur, 7.0),
            (DistortionKind::SpNoise, 0.05),
        ];
        entries
            .iter()
            .enumerate()
            .map(|(i, &(kind, param))| {
                Self::new(kind, param, mix_seed(seed, i as u64)).expect("suite params are valid")
            })
            .collect()
    }

    /// Same distortion with a different seed (per-image derivation).
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    /// Report label; the identity row is conventionally called "Clean".
    pub fn label(&self) -> &'static str {
        match self.kind {
            DistortionKind::RandDrop => "RandDrop",
            DistortionKind::RandCrop => "RandCrop",
            DistortionKind::Resize => "Resize",
            DistortionKind::Jpeg => "JPEG",
            DistortionKind::Bright => "Bright",
            DistortionKind::GausBlur => "GausBlur",
            DistortionKind::GausStd => "GausStd",
            DistortionKind::MedBlur => "MedBlur",
            DistortionKind::SpNoise => "SPNoise",
            DistortionKind::Identity => "Clean",
        }
    }
}

/// Apply one distortion; the output stays in [0,1] with identical shape.
pub fn apply(image: &Image, spec: &DistortionSpec) -> Result<Image> {
    // Re-validate so hand-built specs cannot smuggle bad parameters.
    let spec = DistortionSpec::new(spec.kind, spec.param, spec.seed)?;
    let (_, h, w) = image.dims();
    let out = match spec.kind {
        DistortionKind::Identity => image.clone(),
        DistortionKind::RandDrop => {
            let mut rng = SeededRng::new(spec.seed);
            let mut values = image.values().to_vec();
            for y in 0..h {
                for x in 0..w {
                    if rng.next_f64() < spec.param {
                        for ch in 0..3 {
                            values[(ch * h + y) * w + x] = 0.0;
                        }
                    }
                }
            }
            Image::new(h, w, values)?
        }
        DistortionKind::RandCrop => {
            let mut rng = SeededRng::new(spec.seed);
            let keep_h = ((h as f64 * spec.param.sqrt()).round() as usize).clamp(1, h);
            let keep_w = ((w as f64 * spec.param.sqrt()).round() as usize).clamp(1, w);
            let y0 = rng.below((h - keep_h + 1) as u64) as usize;
            let x0 = rng.below((w - keep_w + 1) as u64) as usize;
            let mut values = vec![0.0; 3 * h * w];
            for ch in 0..3 {
                for y in y0..y0 + keep_h {
                    for x in x0..x0 + keep_w {
                        values[(ch * h + y) * w + x] = image.at(ch, y, x);
                    }
                }
            }
            Image::new(h, w, values)?
        }
        DistortionKind::Resize => {
            let down_h = ((h as f64 * spec.param).round() as usize).max(1);
            let down_w = ((w as f64 * spec.param).round() as usize).max(1);
            let small = bilinear_resize(image.values(), h, w, down_h, down_w);
            let restored = bilinear_resize(&small, down_h, down_w, h, w);
            Image::new(h, w, restored.iter().map(|v| v.clamp(0.0, 1.0)).collect())?
        }
        DistortionKind::Jpeg => jpeg_round_trip(image, spec.param)?,
        DistortionKind::Bright => {
            let values = image
                .values()
                .iter()
                .map(|&v| (v * spec.param).clamp(0.0, 1.0))
                .collect();
            Image::new(h, w, values)?
        }
        DistortionKind::GausBlur => gaussian_blur(image, spec.param)?,
        DistortionKind::GausStd => {
            let mut rng = SeededRng::new(spec.seed);
            let values = image
                .values()
                .iter()
                .map(|&v| (v + spec.param * rng.next_gaussian()).clamp(0.0, 1.0))
                .collect();
            Image::new(h, w, values)?
        }
        DistortionKind::MedBlur => median_blur(image, spec.param as usize)?,
        DistortionKind::SpNoise => {
            let mut rng = SeededRng::new(spec.seed);
            let mut values = image.values().to_vec();
            for y in 0..h {
                for x in 0..w {
                    if rng.next_f64() < spec.param {
                        let level = f64::from(rng.next_bit());
                        for ch in 0..3 {
                            values[(ch * h + y) * w + x] = level;
                        }
                    }
                }
            }
            Image::new(h, w, values)?
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bit-flip channel on sign masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BscSpec {
    /// Crossover probability, at most 1/2.
    pub crossover: f64,
    pub seed: u64,
}

impl BscSpec {
    pub fn new(crossover: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&crossover) {
            return Err(Error::InvalidArgument(format!(
                "crossover must lie in [0, 0.5], got {crossover}"
            )));
        }
        Ok(Self { crossover, seed })
    }
}

/// Negate each mask entry independently with probability `crossover`.
pub fn bsc_flip(mask: &SignMask, spec: &BscSpec) -> SignMask {
    let mut rng = SeededRng::new(spec.seed);
    let (c, h, w) = mask.dims();
    let values = mask
        .values()
        .iter()
        .map(|&v| if rng.next_f64() < spec.crossover { -v } else { v })
        .collect();
    SignMask::new(c, h, w, values).expect("flipping preserves signs")
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

/// Mirror boundary handling (edge pixels included once).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn bilinear_resize(values: &[f64], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * dst_h * dst_w];
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    for ch in 0..3 {
        for y in 0..dst_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(src_h - 1);
            let wy = fy - y0 as f64;
            for x in 0..dst_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(src_w - 1);
                let wx = fx - x0 as f64;
                let v00 = values[(ch * src_h + y0) * src_w + x0];
                let v01 = values[(ch * src_h + y0) * src_w + x1];
                let v10 = values[(ch * src_h + y1) * src_w + x0];
                let v11 = values[(ch * src_h + y1) * src_w + x1];
                let top = v00 + wx * (v01 - v00);
                let bottom = v10 + wx * (v11 - v10);
                out[(ch * dst_h + y) * dst_w + x] = top + wy * (bottom - top);
            }
        }
    }
    out
}

fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    let (_, h, w) = image.dims();
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let src = image.values();
    let mut tmp = vec![0.0; src.len()];
    // Horizontal pass.
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + ki as isize - radius, w);
                    acc += k * src[(ch * h + y) * w + xx];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; src.len()];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + ki as isize - radius, h);
                    acc += k * tmp[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, out)
}

fn median_blur(image: &Image, k: usize) -> Result<Image> {
    let (_, h, w) = image.dims();
    let r = (k / 2) as isize;
    let src = image.values();
    let mut out = vec![0.0; src.len()];
    let mut window = Vec::with_capacity(k * k);
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = reflect(y as isize + dy, h);
                        let xx = reflect(x as isize + dx, w);
                        window.push(src[(ch * h + yy) * w + xx]);
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out[(ch * h + y) * w + x] = window[window.len() / 2];
            }
        }
    }
    Image::new(h, w, out)
}

// ---------------------------------------------------------------------------
// JPEG-style DCT quantization round trip
// ---------------------------------------------------------------------------

/// Baseline luminance quantization table.
const JPEG_LUMA_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn quant_table(quality: f64) -> [f64; 64] {
    let scale = if quality < 50.0 {
        5000.0 / quality
    } else {
        200.0 - 2.0 * quality
    };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(JPEG_LUMA_TABLE.iter()) {
        *o = ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

fn dct8_matrix() -> [f64; 64] {
    let mut c = [0.0; 64];
    for u in 0..8 {
        let scale = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for x in 0..8 {
            c[u * 8 + x] =
                scale * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Per-channel 8x8 block DCT, quantization with the scaled luminance table,
/// dequantization and inverse DCT. Deliberately not bit-exact to any codec;
/// only the degradation character matters.
fn jpeg_round_trip(image: &Image, quality: f64) -> Result<Image> {
    let (_, h, w) = image.dims();
    let q = quant_table(quality);
    let c = dct8_matrix();
    let h8 = h.div_ceil(8) * 8;
    let w8 = w.div_ceil(8) * 8;
    let src = image.values();
    let mut out = vec![0.0; src.len()];

    let mut block = [0.0f64; 64];
    let mut freq = [0.0f64; 64];
    for ch in 0..3 {
        for by in (0..h8).step_by(8) {
            for bx in (0..w8).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        let yy = reflect((by + y) as isize, h);
                        let xx = reflect((bx + x) as isize, w);
                        block[y * 8 + x] = src[(ch * h + yy) * w + xx] * 255.0 - 128.0;
                    }
                }
                // freq = C * block * C^T, quantized in place.
                mat8_mul(&c, &block, &mut freq, false, true);
                for (f, &qv) in freq.iter_mut().zip(q.iter()) {
                    *f = (*f / qv).round() * qv;
                }
                // block = C^T * freq * C.
                mat8_mul(&c, &freq, &mut block, true, false);
                for y in 0..8 {
                    for x in 0..8 {
                        let (yy, xx) = (by + y, bx + x);
                        if yy < h && xx < w {
                            out[(ch * h + yy) * w + xx] =
                                ((block[y * 8 + x] + 128.0) / 255.0).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    Image::new(h, w, out)
}

/// `out = A' * b * A''` over 8x8 blocks, where each side is `c` either plain
/// or transposed: `transpose_left` uses C^T on the left, `transpose_right`
/// uses C^T on the right.
fn mat8_mul(c: &[f64; 64], b: &[f64; 64], out: &mut [f64; 64], transpose_left: bool, transpose_right: bool) {
    let mut tmp = [0.0f64; 64];
    // tmp = L * b
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                let l = if transpose_left { c[k * 8 + i] } else { c[i * 8 + k] };
                acc += l * b[k * 8 + j];
            }
            tmp[i * 8 + j] = acc;
        }
    }
    // out = tmp * R
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                let r = if transpose_right { c[j * 8 + k] } else { c[k * 8 + j] };
                acc += tmp[i * 8 + k] * r;
            }
            out[i * 8 + j] = acc;
        }
    }
}
