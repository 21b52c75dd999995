//! Stand-in for the diffusion generation/inversion channel.
//!
//! Generation integrates the linear flow `dz/dt = A z + b(t)` from t = 1 to
//! t = 0 with explicit Euler steps, then decodes the latent to pixels through
//! a fixed sigmoid map `I = sigmoid(W z0 + b0)` whose matrix has orthonormal
//! columns. Inversion re-encodes pixels with the exact logit pseudo-inverse
//! and integrates the same flow back from t = 0 to t = 1. With quantization
//! off and zero drift the whole chain is an identity on signs; the 8-bit
//! round trip and the Euler step mismatch supply the channel noise otherwise.
//!
//! `A` is a seeded symmetric contraction (`Q diag(e) Q^T`, spectral norm at
//! most 0.5) and `b(t) = b_c + t * b_l` with small seeded vectors, so the
//! exact flow has a closed form against which the integrator can be tested.
//! A `drift_seed` of 0 disables the drift entirely (A = 0, b = 0).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::latent::{sample_gaussian, Latent};
use crate::linalg::{seeded_orthonormal_columns, seeded_symmetric_contraction, Mat};
use crate::rng::SeededRng;
use crate::wmcodec::LatentShape;

/// Spectral norm bound of the seeded drift matrix.
pub const DRIFT_NORM: f64 = 0.5;
/// Scale of the seeded time-dependent bias vectors.
pub const BIAS_SCALE: f64 = 0.1;
/// Scale of the decoder output bias.
pub const DECODER_BIAS_SCALE: f64 = 0.25;
/// Pixel clip applied before the logit in `encode`.
pub const ENCODE_CLIP: f64 = 1e-4;

const IMAGE_MAGIC: &[u8; 8] = b"LMKIMG01";
const DATASET_MAGIC: &[u8; 8] = b"LMKSET01";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub shape: LatentShape,
    /// Euler steps for generation (T).
    pub steps_gen: usize,
    /// Seed for the drift matrix and bias; 0 disables the drift (A = 0, b = 0).
    pub drift_seed: u64,
    /// Seed for the decoder matrix and bias.
    pub decoder_seed: u64,
    /// Output image height and width (3 channels).
    pub image_hw: (usize, usize),
    /// 8-bit round trip on the decoded image.
    pub quantize: bool,
}

impl PipelineConfig {
    /// Default desk scale: 4x16x16 latent, 3x64x64 image, 50 generation steps.
    pub fn desk_default() -> Self {
        Self {
            shape: LatentShape::new(4, 16, 16, 1).expect("static shape"),
            steps_gen: 50,
            drift_seed: 0x0dd5_eed1,
            decoder_seed: 0xdec0_5eed,
            image_hw: (64, 64),
            quantize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_gen == 0 {
            return Err(Error::InvalidArgument("steps_gen must be >= 1".into()));
        }
        let (h, w) = self.image_hw;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("image dims must be >= 1".into()));
        }
        if 3 * h * w < self.shape.elements() {
            return Err(Error::InvalidArgument(format!(
                "image pixel count {} is below latent element count {}",
                3 * h * w,
                self.shape.elements()
            )));
        }
        Ok(())
    }
}

/// A 3-channel pixel tensor with entries in [0, 1], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 3 * h * w {
            return Err(Error::ShapeMismatch(format!(
                "image 3x{h}x{w} needs {} values, got {}",
                3 * h * w,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixels must lie in [0, 1]".into()));
        }
        Ok(Self { h, w, values })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (3, self.h, self.w)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.values[(ch * self.h + y) * self.w + x]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(24 + 4 * self.values.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.h as u32).to_le_bytes());
        out.extend_from_slice(&(self.w as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)?;
        let mut header = [0u8; 24];
        file.read_exact(&mut header)?;
        if &header[..8] != IMAGE_MAGIC {
            return Err(Error::Format(format!("{}: not an image file", path.display())));
        }
        let h = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() != 12 * h * w {
            return Err(Error::Format("image payload length mismatch".into()));
        }
        let values = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Image::new(h, w, values)
    }
}

/// One training record: the generated image, its 0-step latent, and the
/// initial noise whose signs serve as labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub image: Image,
    pub z0: Latent,
    pub z_t: Latent,
}

/// The realized channel: seeded operators are built once and reused.
pub struct Pipeline {
    cfg: PipelineConfig,
    latent_n: usize,
    image_m: usize,
    drift: Option<Mat>,
    bias_const: Vec<f64>,
    bias_tilt: Vec<f64>,
    dec_w: Mat,
    dec_wt: Mat,
    dec_bias: Vec<f64>,
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.shape.elements();
        let (ih, iw) = cfg.image_hw;
        let m = 3 * ih * iw;

        let (drift, bias_const, bias_tilt) = if cfg.drift_seed == 0 {
            (None, vec![0.0; n], vec![0.0; n])
        } else {
            let mut rng = SeededRng::with_stream(cfg.drift_seed, 1);
            let a = seeded_symmetric_contraction(n, &mut rng, DRIFT_NORM);
            let mut bias_rng = SeededRng::with_stream(cfg.drift_seed, 2);
            let bias_const = (0..n).map(|_| BIAS_SCALE * bias_rng.next_gaussian()).collect();
            let bias_tilt = (0..n).map(|_| BIAS_SCALE * bias_rng.next_gaussian()).collect();
            (Some(a), bias_const, bias_tilt)
        };

        let mut dec_rng = SeededRng::with_stream(cfg.decoder_seed, 1);
        let (dec_w, dec_wt) = seeded_orthonormal_columns(m, n, &mut dec_rng);
        let mut bias_rng = SeededRng::with_stream(cfg.decoder_seed, 2);
        let dec_bias = (0..m)
            .map(|_| DECODER_BIAS_SCALE * bias_rng.next_gaussian())
            .collect();

        Ok(Self {
            cfg: *cfg,
            latent_n: n,
            image_m: m,
            drift,
            bias_const,
            bias_tilt,
            dec_w,
            dec_wt,
            dec_bias,
        })
    }

    /// Pipeline with caller-supplied drift, for experiments that need an
    /// exactly known flow. `drift` is a dense row-major n x n matrix.
    pub fn with_drift(
        cfg: &PipelineConfig,
        drift: Option<Vec<f64>>,
        bias_const: Vec<f64>,
        bias_tilt: Vec<f64>,
    ) -> Result<Self> {
        let mut pipeline = Self::new(cfg)?;
        let n = pipeline.latent_n;
        if bias_const.len() != n || bias_tilt.len() != n {
            return Err(Error::ShapeMismatch("bias length must equal latent size".into()));
        }
        pipeline.drift = match drift {
            Some(data) => {
                if data.len() != n * n {
                    return Err(Error::ShapeMismatch("drift must be n x n".into()));
                }
                Some(Mat::from_data(n, n, data))
            }
            None => None,
        };
        pipeline.bias_const = bias_const;
        pipeline.bias_tilt = bias_tilt;
        Ok(pipeline)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn latent_elements(&self) -> usize {
        self.latent_n
    }

    pub fn image_elements(&self) -> usize {
        self.image_m
    }

    /// Dense drift matrix for external verification; `None` when the drift
    /// is disabled.
    #[doc(hidden)]
    pub fn drift_dense(&self) -> Option<Vec<f64>> {
        self.drift.as_ref().map(|a| a.data.clone())
    }

    #[doc(hidden)]
    pub fn bias_at(&self, t: f64) -> Vec<f64> {
        self.bias_const
            .iter()
            .zip(&self.bias_tilt)
            .map(|(&c, &l)| c + t * l)
            .collect()
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        let s = self.cfg.shape;
        if z.dims() != (s.c, s.h, s.w) {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} does not match pipeline shape {}",
                z.dims(),
                s
            )));
        }
        Ok(())
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if (image.height(), image.width()) != self.cfg.image_hw {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} does not match pipeline image {}x{}",
                image.height(),
                image.width(),
                self.cfg.image_hw.0,
                self.cfg.image_hw.1
            )));
        }
        Ok(())
    }

    /// `buf = A z + b(t)`.
    fn drift_field(&self, z: &[f64], t: f64, buf: &mut [f64]) {
        match &self.drift {
            Some(a) => a.matvec_into(z, buf),
            None => buf.fill(0.0),
        }
        for (i, b) in buf.iter_mut().enumerate() {
            *b += self.bias_const[i] + t * self.bias_tilt[i];
        }
    }

    /// Integrate the flow from t = 1 to t = 0 and decode to pixels.
    pub fn generate(&self, z_t: &Latent) -> Result<(Latent, Image)> {
        self.check_latent(z_t)?;
        let steps = self.cfg.steps_gen;
        let dt = 1.0 / steps as f64;
        let mut z = z_t.values().to_vec();
        let mut buf = vec![0.0; self.latent_n];
        for k in 0..steps {
            let t = 1.0 - k as f64 * dt;
            self.drift_field(&z, t, &mut buf);
            for (zi, bi) in z.iter_mut().zip(&buf) {
                *zi -= dt * bi;
            }
        }
        let s = self.cfg.shape;
        let z0 = Latent::new(s.c, s.h, s.w, z)?;
        let image = self.decode(&z0)?;
        Ok((z0, image))
    }

    /// `I = sigmoid(W z0 + b0)`, optionally rounded to 8-bit levels.
    pub fn decode(&self, z0: &Latent) -> Result<Image> {
        self.check_latent(z0)?;
        let mut y = self.dec_w.matvec(z0.values());
        for (yi, b) in y.iter_mut().zip(&self.dec_bias) {
            let v = 1.0 / (1.0 + (-(*yi + b)).exp());
            *yi = if self.cfg.quantize {
                (v * 255.0).round() / 255.0
            } else {
                v
            };
        }
        let (h, w) = self.cfg.image_hw;
        Image::new(h, w, y)
    }

    /// `z0_hat = W^T (logit(clip(I)) - b0)`; exact pseudo-inverse of `decode`
    /// when quantization is off.
    pub fn encode(&self, image: &Image) -> Result<Latent> {
        self.check_image(image)?;
        counters::record_encoder_pass();
        let centered: Vec<f64> = image
            .values()
            .iter()
            .zip(&self.dec_bias)
            .map(|(&p, &b)| {
                let p = p.clamp(ENCODE_CLIP, 1.0 - ENCODE_CLIP);
                (p / (1.0 - p)).ln() - b
            })
            .collect();
        let z = self.dec_wt.matvec(&centered);
        let s = self.cfg.shape;
        Latent::new(s.c, s.h, s.w, z)
    }

    /// Integrate the flow from t = 0 back to t = 1 starting from a latent.
    /// Substituting the true `z0` here reproduces the alignment experiment.
    pub fn invert_from_latent(&self, z0_hat: &Latent, steps_inv: usize) -> Result<Latent> {
        let trace = self.invert_trace_from_latent(z0_hat, steps_inv)?;
        Ok(trace.into_iter().next_back().expect("trace is never empty"))
    }

    /// As `invert_from_latent` but keeping each intermediate latent.
    /// `trace[0]` is the starting latent (step 0 = encoder output when the
    /// start came from `encode`); `trace[steps_inv]` is the recovered noise.
    pub fn invert_trace_from_latent(
        &self,
        z0_hat: &Latent,
        steps_inv: usize,
    ) -> Result<Vec<Latent>> {
        self.check_latent(z0_hat)?;
        if steps_inv == 0 {
            return Err(Error::InvalidArgument("steps_inv must be >= 1".into()));
        }
        let s = self.cfg.shape;
        let dt = 1.0 / steps_inv as f64;
        let mut z = z0_hat.values().to_vec();
        let mut buf = vec![0.0; self.latent_n];
        let mut trace = Vec::with_capacity(steps_inv + 1);
        trace.push(z0_hat.clone());
        for k in 0..steps_inv {
            let t = k as f64 * dt;
            self.drift_field(&z, t, &mut buf);
            for (zi, bi) in z.iter_mut().zip(&buf) {
                *zi += dt * bi;
            }
            trace.push(Latent::new(s.c, s.h, s.w, z.clone())?);
        }
        Ok(trace)
    }

    /// Encode, then integrate back to t = 1: the multi-step extractor.
    pub fn invert_multistep(&self, image: &Image, steps_inv: usize) -> Result<Latent> {
        let z0_hat = self.encode(image)?;
        self.invert_from_latent(&z0_hat, steps_inv)
    }

    /// Multi-step inversion keeping per-step latents for step-wise accuracy.
    pub fn invert_multistep_trace(&self, image: &Image, steps_inv: usize) -> Result<Vec<Latent>> {
        let z0_hat = self.encode(image)?;
        self.invert_trace_from_latent(&z0_hat, steps_inv)
    }

    /// Synthesize `n` watermark-free triplets; item `i` uses seed `seed + i`,
    /// so the result is independent of thread count.
    pub fn synth_dataset(&self, n: usize, seed: u64) -> Result<Vec<Triplet>> {
        if n == 0 {
            return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
        }
        (0..n)
            .into_par_iter()
            .map(|i| {
                let z_t = sample_gaussian(&self.cfg.shape, seed.wrapping_add(i as u64));
                let (z0, image) = self.generate(&z_t)?;
                Ok(Triplet { image, z0, z_t })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Triplet dataset persistence
// ---------------------------------------------------------------------------

/// Header (magic, version, count, shapes), then per-record image, z0 and z_T
/// as little-endian f32.
pub fn save_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty dataset".into()));
    }
    let (_, ih, iw) = triplets[0].image.dims();
    let (c, h, w) = triplets[0].z0.dims();
    let mut sink = BufWriter::new(fs::File::create(path)?);
    sink.write_all(DATASET_MAGIC)?;
    sink.write_all(&FILE_VERSION.to_le_bytes())?;
    sink.write_all(&(triplets.len() as u32).to_le_bytes())?;
    for d in [ih, iw, c, h, w] {
        sink.write_all(&(d as u32).to_le_bytes())?;
    }
    for t in triplets {
        if t.image.dims() != (3, ih, iw) || t.z0.dims() != (c, h, w) || t.z_t.dims() != (c, h, w) {
            return Err(Error::ShapeMismatch("inconsistent triplet shapes".into()));
        }
        for &v in t.image.values() {
            sink.write_all(&(v as f32).to_le_bytes())?;
        }
        t.z0.write_f32(&mut sink)?;
        t.z_t.write_f32(&mut sink)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let mut file = BufReader::new(fs::File::open(path)?);
    let mut header = [0u8; 36];
    file.read_exact(&mut header)?;
    if &header[..8] != DATASET_MAGIC {
        return Err(Error::Format(format!("{}: not a triplet dataset", path.display())));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != FILE_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let dims: Vec<usize> = (0..5)
        .map(|i| u32::from_le_bytes(header[16 + 4 * i..20 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let (ih, iw, c, h, w) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let image_len = 3 * ih * iw;
    let latent_len = c * h * w;

    let mut read_f32s = |len: usize| -> Result<Vec<f64>> {
        let mut raw = vec![0u8; 4 * len];
        file.read_exact(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect())
    };

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let image = Image::new(ih, iw, read_f32s(image_len)?)?;
        let z0 = Latent::new(c, h, w, read_f32s(latent_len)?)?;
        let z_t = Latent::new(c, h, w, read_f32s(latent_len)?)?;
        out.push(Triplet { image, z0, z_t });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            shape: LatentShape::new(2, 4, 4, 1).unwrap(),
            steps_gen: 20,
            drift_seed: 7,
            decoder_seed: 9,
            image_hw: (8, 8),
            quantize: false,
        }
    }

    #[test]
    fn zero_drift_generation_is_identity() {
        let cfg = PipelineConfig {
            drift_seed: 0,
            ..small_config()
        };
        let pipeline = Pipeline::new(&cfg).unwrap();
        let z_t = sample_gaussian(&cfg.shape, 3);
        let (z0, _) = pipeline.generate(&z_t).unwrap();
        assert_eq!(z0, z_t);
        // And inversion from the latent is the identity too.
        for steps in [1, 5, 50] {
            let back = pipeline.invert_from_latent(&z0, steps).unwrap();
            assert_eq!(back, z_t);
        }
    }

    #[test]
    fn scalar_pipeline_matches_closed_form() {
        // One latent element with A = [ln 2]: the exact flow from t=1 to t=0
        // is z0 = z_T / 2.
        let cfg = PipelineConfig {
            shape: LatentShape::new(1, 1, 1, 1).unwrap(),
            steps_gen: 1000,
            drift_seed: 1,
            decoder_seed: 9,
            image_hw: (1, 1),
            quantize: false,
        };
        let pipeline =
            Pipeline::with_drift(&cfg, Some(vec![std::f64::consts::LN_2]), vec![0.0], vec![0.0])
                .unwrap();
        let z_t = Latent::new(1, 1, 1, vec![1.8]).unwrap();
        let (z0, _) = pipeline.generate(&z_t).unwrap();
        assert!(
            (z0.values()[0] - 0.9).abs() < 1e-3,
            "euler result {} vs analytic 0.9",
            z0.values()[0]
        );
    }

    #[test]
    fn encode_is_pseudo_inverse_without_quantization() {
        let cfg = small_config();
        let pipeline = Pipeline::new(&cfg).unwrap();
        let z_t = sample_gaussian(&cfg.shape, 11);
        let (z0, image) = pipeline.generate(&z_t).unwrap();
        let z0_hat = pipeline.encode(&image).unwrap();
        let max_err = z0
            .values()
            .iter()
            .zip(z0_hat.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-5, "round-trip error {max_err}");
    }

    #[test]
    fn quantization_introduces_round_trip_noise() {
        let cfg = PipelineConfig {
            quantize: true,
            ..small_config()
        };
        let pipeline = Pipeline::new(&cfg).unwrap();
        let z_t = sample_gaussian(&cfg.shape, 13);
        let (z0, image) = pipeline.generate(&z_t).unwrap();
        let z0_hat = pipeline.encode(&image).unwrap();
        let max_err = z0
            .values()
            .iter()
            .zip(z0_hat.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err > 0.0);
        // Quantized pixels sit exactly on the 8-bit lattice.
        for &p in image.values() {
            let scaled = p * 255.0;
            assert!((scaled - scaled.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_half_image_encodes_to_negative_projected_bias() {
        let cfg = small_config();
        let pipeline = Pipeline::new(&cfg).unwrap();
        let image = Image::new(8, 8, vec![0.5; 192]).unwrap();
        let z0_hat = pipeline.encode(&image).unwrap();
        // logit(0.5) = 0, so the encoding is -W^T b0.
        let expected = pipeline.dec_wt.matvec(&pipeline.dec_bias);
        for (got, e) in z0_hat.values().iter().zip(&expected) {
            assert!((got + e).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_columns_orthonormal_at_working_scale() {
        let pipeline = Pipeline::new(&small_config()).unwrap();
        let n = pipeline.latent_n;
        for i in 0..n {
            for j in 0..n {
                let g = crate::linalg::dot(pipeline.dec_wt.row(i), pipeline.dec_wt.row(j));
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((g - expected).abs() < 1e-6, "gram[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn trace_starts_at_encoder_output_and_ends_at_inversion() {
        let cfg = small_config();
        let pipeline = Pipeline::new(&cfg).unwrap();
        let z_t = sample_gaussian(&cfg.shape, 21);
        let (_, image) = pipeline.generate(&z_t).unwrap();
        let trace = pipeline.invert_multistep_trace(&image, 6).unwrap();
        assert_eq!(trace.len(), 7);
        assert_eq!(trace[0], pipeline.encode(&image).unwrap());
        assert_eq!(
            trace.last().unwrap(),
            &pipeline.invert_multistep(&image, 6).unwrap()
        );
    }

    #[test]
    fn synth_dataset_is_reproducible_and_consistent() {
        let cfg = small_config();
        let pipeline = Pipeline::new(&cfg).unwrap();
        let a = pipeline.synth_dataset(3, 400).unwrap();
        let b = pipeline.synth_dataset(3, 400).unwrap();
        assert_eq!(a, b);
        // Stored z0 is exactly the generator output for the stored z_T.
        for t in &a {
            let (z0, image) = pipeline.generate(&t.z_t).unwrap();
            assert_eq!(t.z0, z0);
            assert_eq!(t.image, image);
        }
        // Item 1 of a 3-item run equals item 0 of a run seeded one higher.
        let shifted = pipeline.synth_dataset(1, 401).unwrap();
        assert_eq!(a[1], shifted[0]);
    }

    #[test]
    fn synth_signs_are_balanced() {
        let cfg = small_config();
        let pipeline = Pipeline::new(&cfg).unwrap();
        // 4000 x 32 latent entries > 1e5 positions.
        let data = pipeline.synth_dataset(4000, 1234).unwrap();
        let mut positives = 0usize;
        let mut total = 0usize;
        for t in &data {
            positives += t.z_t.values().iter().filter(|&&v| v >= 0.0).count();
            total += t.z_t.len();
        }
        let frac = positives as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.01, "positive sign fraction {frac}");
    }

    #[test]
    fn dataset_file_round_trip() {
        let cfg = small_config();
        let pipeline = Pipeline::new(&cfg).unwrap();
        let data = pipeline.synth_dataset(4, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_triplets(&path, &data).unwrap();
        let loaded = load_triplets(&path).unwrap();
        assert_eq!(loaded.len(), data.len());
        for (l, d) in loaded.iter().zip(&data) {
            assert_eq!(l.z0.dims(), d.z0.dims());
            for (a, b) in l.z_t.values().iter().zip(d.z_t.values()) {
                assert_eq!(*a, f64::from(*b as f32));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.steps_gen = 0;
        assert!(Pipeline::new(&cfg).is_err());
        let mut cfg = small_config();
        cfg.image_hw = (2, 2); // 12 pixels < 32 latent elements
        assert!(Pipeline::new(&cfg).is_err());
    }
}
