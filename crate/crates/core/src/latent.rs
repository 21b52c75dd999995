//! Gaussian latent sampling and sign injection.
//!
//! The watermark enters the channel here: `inject_signs` overwrites the signs
//! of a standard-normal draw with an encrypted sign mask, leaving magnitudes
//! untouched, so watermarked latents stay standard normal marginally as long
//! as the mask bits are balanced and independent of the draw.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::wmcodec::LatentShape;

const LATENT_MAGIC: &[u8; 8] = b"LMKLAT01";
const LATENT_VERSION: u32 = 1;

/// A `c x h x w` real tensor in latent units, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    c: usize,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl Latent {
    pub fn new(c: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "latent {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                values.len()
            )));
        }
        Ok(Self { c, h, w, values })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            values: vec![0.0; c * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// 16-byte magic+version header, u32 dims, little-endian f32 row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(28 + 4 * self.values.len());
        out.extend_from_slice(LATENT_MAGIC);
        out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for d in [self.c, self.h, self.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)?;
        let mut header = [0u8; 28];
        file.read_exact(&mut header)?;
        if &header[..8] != LATENT_MAGIC {
            return Err(Error::Format(format!("{}: not a latent file", path.display())));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != LATENT_VERSION {
            return Err(Error::Format(format!("unsupported latent version {version}")));
        }
        let c = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() != 4 * c * h * w {
            return Err(Error::Format(format!(
                "latent payload is {} bytes, expected {}",
                raw.len(),
                4 * c * h * w
            )));
        }
        let values = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Latent::new(c, h, w, values)
    }

    pub(crate) fn write_f32<W: Write>(&self, mut sink: W) -> Result<()> {
        for &v in &self.values {
            sink.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

/// A `c x h x w` tensor with entries exactly +1 or -1.
#[derive(Debug, Clone, PartialEq)]
pub struct SignMask {
    c: usize,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl SignMask {
    pub fn new(c: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                values.len()
            )));
        }
        if values.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidArgument("mask entries must be +1 or -1".into()));
        }
        Ok(Self { c, h, w, values })
    }

    /// Construction without the sign check, for tests that corrupt a mask.
    #[doc(hidden)]
    pub fn new_unchecked(c: usize, h: usize, w: usize, values: Vec<f64>) -> Self {
        Self { c, h, w, values }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
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

    /// Fraction of positions where the two masks agree (latent bit accuracy).
    pub fn agreement(&self, other: &SignMask) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch("mask dims differ".into()));
        }
        let same = self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.values.len() as f64)
    }
}

/// I.i.d. standard normal draw; identical output for identical (shape, seed).
pub fn sample_gaussian(shape: &LatentShape, seed: u64) -> Latent {
    let mut rng = SeededRng::with_stream(seed, 0x5a54);
    let values = (0..shape.elements()).map(|_| rng.next_gaussian()).collect();
    Latent {
        c: shape.c,
        h: shape.h,
        w: shape.w,
        values,
    }
}

/// `out = |z| * m` elementwise: the mask dictates every sign.
pub fn inject_signs(z: &Latent, m: &SignMask) -> Result<Latent> {
    if z.dims() != m.dims() {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs mask {:?}",
            z.dims(),
            m.dims()
        )));
    }
    let values = z
        .values
        .iter()
        .zip(&m.values)
        .map(|(&v, &s)| v.abs() * s)
        .collect();
    Ok(Latent {
        c: z.c,
        h: z.h,
        w: z.w,
        values,
    })
}

/// Elementwise sign with `sign(0) = +1`; rejects non-finite entries.
pub fn extract_signs(z: &Latent) -> Result<SignMask> {
    let mut values = Vec::with_capacity(z.values.len());
    for &v in &z.values {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cannot take sign of non-finite value {v}"
            )));
        }
        values.push(if v < 0.0 { -1.0 } else { 1.0 });
    }
    Ok(SignMask {
        c: z.c,
        h: z.h,
        w: z.w,
        values,
    })
}
