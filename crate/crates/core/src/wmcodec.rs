//! Watermark payloads, repetition coding over the latent grid, and decoding.
//!
//! A `k`-bit watermark tiles the latent grid in `f_hw x f_hw` spatial blocks
//! per channel: watermark bit `(ch, i, j)` fills block rows `i*f..(i+1)*f`,
//! cols `j*f..(j+1)*f` of channel `ch`. Grids are stored row-major with flat
//! index `(ch*h + y)*w + x`. Hard decoding takes the majority over the f_hw^2
//! copies of each bit, with exact ties (possible only for even `f_hw`)
//! resolving to 0. Soft decoding aggregates log-odds across copies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` before taking
/// log-odds so saturated classifier outputs cannot produce infinities.
pub const PROB_EPS: f64 = 1e-7;

/// Latent grid geometry plus the repetition factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f_hw: usize,
}

impl LatentShape {
    pub fn new(c: usize, h: usize, w: usize, f_hw: usize) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent dims must be >= 1, got {c}x{h}x{w}"
            )));
        }
        if f_hw == 0 {
            return Err(Error::InvalidArgument("f_hw must be >= 1".into()));
        }
        if h % f_hw != 0 || w % f_hw != 0 {
            return Err(Error::InvalidArgument(format!(
                "f_hw {f_hw} must divide both h {h} and w {w}"
            )));
        }
        Ok(Self { c, h, w, f_hw })
    }

    /// Total latent positions, `c*h*w`.
    pub fn elements(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Watermark length `k = c * (h/f) * (w/f)`.
    pub fn payload_len(&self) -> usize {
        self.c * (self.h / self.f_hw) * (self.w / self.f_hw)
    }

    /// Copies per watermark bit, `f_hw^2`.
    pub fn copies(&self) -> usize {
        self.f_hw * self.f_hw
    }

    /// Same grid with a different repetition factor.
    pub fn with_f_hw(&self, f_hw: usize) -> Result<Self> {
        Self::new(self.c, self.h, self.w, f_hw)
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}/f{}", self.c, self.h, self.w, self.f_hw)
    }
}

/// The k-bit binary payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Watermark {
    bits: Vec<u8>,
}

impl Watermark {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("watermark must have >= 1 bit".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("watermark bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = SeededRng::with_stream(seed, 0x574d);
        Self {
            bits: (0..k).map(|_| rng.next_bit()).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Big-endian bit packing: MSB-first within each byte, zero-padded tail.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &bit) in self.bits.iter().enumerate() {
            out[i / 8] |= bit << (7 - i % 8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], k: usize) -> Result<Self> {
        if bytes.len() != k.div_ceil(8) {
            return Err(Error::Format(format!(
                "expected {} bytes for a {k}-bit watermark, got {}",
                k.div_ceil(8),
                bytes.len()
            )));
        }
        let bits = (0..k).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect();
        Ok(Self { bits })
    }
}

/// A full-resolution bit field over the latent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    c: usize,
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl BitGrid {
    pub fn new(c: usize, h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "grid {c}x{h}x{w} needs {} bits, got {}",
                c * h * w,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("grid bits must be 0 or 1".into()));
        }
        Ok(Self { c, h, w, bits })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Per-position probabilities of the positive sign, flat over `c*h*w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBits {
    probs: Vec<f64>,
}

impl SoftBits {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_grid_shape(dims: (usize, usize, usize), shape: &LatentShape) -> Result<()> {
    if dims != (shape.c, shape.h, shape.w) {
        return Err(Error::ShapeMismatch(format!(
            "grid {}x{}x{} does not match shape {shape}",
            dims.0, dims.1, dims.2
        )));
    }
    Ok(())
}

/// Tile each watermark bit over its `f_hw x f_hw` spatial block.
pub fn repeat_expand(wm: &Watermark, shape: &LatentShape) -> Result<BitGrid> {
    if wm.len() != shape.payload_len() {
        return Err(Error::InvalidArgument(format!(
            "watermark length {} does not match shape {shape} payload {}",
            wm.len(),
            shape.payload_len()
        )));
    }
    let (c, h, w, f) = (shape.c, shape.h, shape.w, shape.f_hw);
    let (bh, bw) = (h / f, w / f);
    let mut bits = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let bit = wm.bits[(ch * bh + y / f) * bw + x / f];
                bits[(ch * h + y) * w + x] = bit;
            }
        }
    }
    Ok(BitGrid { c, h, w, bits })
}

/// Majority vote over each bit's copies; exact ties resolve to 0.
pub fn majority_decode(grid: &BitGrid, shape: &LatentShape) -> Result<Watermark> {
    check_grid_shape(grid.dims(), shape)?;
    let (c, h, w, f) = (shape.c, shape.h, shape.w, shape.f_hw);
    let (bh, bw) = (h / f, w / f);
    let copies = shape.copies();
    let mut bits = vec![0u8; shape.payload_len()];
    for ch in 0..c {
        for i in 0..bh {
            for j in 0..bw {
                let mut ones = 0usize;
                for dy in 0..f {
                    for dx in 0..f {
                        let y = i * f + dy;
                        let x = j * f + dx;
                        ones += grid.bits[(ch * h + y) * w + x] as usize;
                    }
                }
                bits[(ch * bh + i) * bw + j] = u8::from(2 * ones > copies);
            }
        }
    }
    Ok(Watermark { bits })
}

/// Log-odds aggregation across copies; a zero sum resolves to 0.
pub fn soft_decode(soft: &SoftBits, shape: &LatentShape) -> Result<Watermark> {
    if soft.len() != shape.elements() {
        return Err(Error::ShapeMismatch(format!(
            "got {} probabilities for shape {shape} with {} positions",
            soft.len(),
            shape.elements()
        )));
    }
    let (c, h, w, f) = (shape.c, shape.h, shape.w, shape.f_hw);
    let (bh, bw) = (h / f, w / f);
    let mut bits = vec![0u8; shape.payload_len()];
    for ch in 0..c {
        for i in 0..bh {
            for j in 0..bw {
                let mut log_odds = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        let y = i * f + dy;
                        let x = j * f + dx;
                        let p = soft.probs[(ch * h + y) * w + x].clamp(PROB_EPS, 1.0 - PROB_EPS);
                        log_odds += (p / (1.0 - p)).ln();
                    }
                }
                bits[(ch * bh + i) * bw + j] = u8::from(log_odds > 0.0);
            }
        }
    }
    Ok(Watermark { bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_validation() {
        assert!(LatentShape::new(4, 16, 16, 1).is_ok());
        assert!(LatentShape::new(4, 16, 16, 3).is_err());
        assert!(LatentShape::new(0, 16, 16, 1).is_err());
        assert!(LatentShape::new(4, 16, 16, 0).is_err());
        let s = LatentShape::new(4, 16, 16, 8).unwrap();
        assert_eq!(s.payload_len(), 16);
        assert_eq!(s.copies(), 64);
    }

    #[test]
    fn repeat_identity_when_f_is_one() {
        let shape = LatentShape::new(1, 2, 2, 1).unwrap();
        let wm = Watermark::from_bits(vec![0, 1, 1, 0]).unwrap();
        let grid = repeat_expand(&wm, &shape).unwrap();
        assert_eq!(grid.bits(), &[0, 1, 1, 0]);
        assert_eq!(majority_decode(&grid, &shape).unwrap(), wm);
    }

    #[test]
    fn repeat_single_bit_tiling() {
        let shape = LatentShape::new(1, 2, 2, 2).unwrap();
        let wm = Watermark::from_bits(vec![1]).unwrap();
        let grid = repeat_expand(&wm, &shape).unwrap();
        assert_eq!(grid.bits(), &[1, 1, 1, 1]);
    }

    #[test]
    fn repeat_matches_brute_force_index_oracle() {
        let shape = LatentShape::new(1, 4, 4, 2).unwrap();
        let wm = Watermark::from_bits(vec![1, 0, 0, 1]).unwrap();
        let grid = repeat_expand(&wm, &shape).unwrap();
        // Independent index computation: bit (i, j) owns rows 2i..2i+2 and
        // cols 2j..2j+2 in row-major block order.
        for y in 0..4 {
            for x in 0..4 {
                let expected = wm.bits()[(y / 2) * 2 + x / 2];
                assert_eq!(grid.bits()[y * 4 + x], expected, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn majority_vote_and_tie_rule() {
        let shape = LatentShape::new(1, 2, 2, 2).unwrap();
        let grid = BitGrid::new(1, 2, 2, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(majority_decode(&grid, &shape).unwrap().bits(), &[1]);
        let tie = BitGrid::new(1, 2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(majority_decode(&tie, &shape).unwrap().bits(), &[0]);
    }

    #[test]
    fn soft_decode_examples() {
        let shape = LatentShape::new(1, 2, 2, 2).unwrap();
        // log-odds sum of [0.9, 0.8, 0.4, 0.3] is about 2.331 > 0.
        let soft = SoftBits::new(vec![0.9, 0.8, 0.4, 0.3]).unwrap();
        assert_eq!(soft_decode(&soft, &shape).unwrap().bits(), &[1]);
        let sum: f64 = [0.9, 0.8, 0.4, 0.3]
            .iter()
            .map(|p: &f64| (p / (1.0 - p)).ln())
            .sum();
        assert!((sum - 2.331).abs() < 1e-3);

        let neutral = SoftBits::new(vec![0.5; 4]).unwrap();
        assert_eq!(soft_decode(&neutral, &shape).unwrap().bits(), &[0]);

        let single = LatentShape::new(1, 1, 1, 1).unwrap();
        let soft = SoftBits::new(vec![0.2]).unwrap();
        assert_eq!(soft_decode(&soft, &single).unwrap().bits(), &[0]);
    }

    #[test]
    fn saturated_probs_survive_clipping() {
        let shape = LatentShape::new(1, 1, 1, 1).unwrap();
        for (p, expected) in [(1.0, 1u8), (0.0, 0u8)] {
            let soft = SoftBits::new(vec![p]).unwrap();
            assert_eq!(soft_decode(&soft, &shape).unwrap().bits(), &[expected]);
        }
    }

    #[test]
    fn packing_msb_first_with_zero_padding() {
        let wm = Watermark::from_bits(vec![1, 0, 1, 0, 0, 1, 0, 1]).unwrap();
        assert_eq!(wm.to_bytes(), vec![0xA5]);
        let short = Watermark::from_bits(vec![1, 1, 1, 1]).unwrap();
        assert_eq!(short.to_bytes(), vec![0xF0]);
        assert_eq!(Watermark::from_bytes(&[0xF0], 4).unwrap(), short);
    }

    fn shape_strategy() -> impl Strategy<Value = LatentShape> {
        (1usize..=3, 1usize..=3, 1usize..=3, prop::sample::select(vec![1usize, 2, 3, 4]))
            .prop_map(|(c, bh, bw, f)| LatentShape::new(c, bh * f, bw * f, f).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip_decode(shape in shape_strategy(), seed in any::<u64>()) {
            let wm = Watermark::random(shape.payload_len(), seed);
            let grid = repeat_expand(&wm, &shape).unwrap();
            prop_assert_eq!(majority_decode(&grid, &shape).unwrap(), wm);
        }

        #[test]
        fn soft_agrees_with_hard_on_saturated_probs(
            c in 1usize..=2, bh in 1usize..=2, bw in 1usize..=2,
            f in prop::sample::select(vec![1usize, 3]),
            seed in any::<u64>(),
        ) {
            // Odd f_hw makes f_hw^2 odd, so no ties occur.
            let shape = LatentShape::new(c, bh * f, bw * f, f).unwrap();
            let mut rng = SeededRng::new(seed);
            let bits: Vec<u8> = (0..shape.elements()).map(|_| rng.next_bit()).collect();
            let grid = BitGrid::new(shape.c, shape.h, shape.w, bits.clone()).unwrap();
            let probs: Vec<f64> = bits
                .iter()
                .map(|&b| if b == 1 { 1.0 - PROB_EPS } else { PROB_EPS })
                .collect();
            let soft = SoftBits::new(probs).unwrap();
            prop_assert_eq!(
                soft_decode(&soft, &shape).unwrap(),
                majority_decode(&grid, &shape).unwrap()
            );
        }

        #[test]
        fn sub_majority_flips_never_change_decode(
            shape in shape_strategy(),
            seed in any::<u64>(),
        ) {
            let wm = Watermark::random(shape.payload_len(), seed);
            let grid = repeat_expand(&wm, &shape).unwrap();
            let copies = shape.copies();
            let max_flips = copies.div_ceil(2).saturating_sub(1);
            let mut rng = SeededRng::new(seed ^ 0xF00D);
            // Flip up to max_flips copies of bit 0 (block at channel 0, origin).
            let flips = (rng.below(max_flips as u64 + 1)) as usize;
            let mut bits = grid.bits().to_vec();
            let f = shape.f_hw;
            let mut flipped = 0;
            'outer: for dy in 0..f {
                for dx in 0..f {
                    if flipped == flips {
                        break 'outer;
                    }
                    let idx = dy * shape.w + dx;
                    bits[idx] ^= 1;
                    flipped += 1;
                }
            }
            let tampered = BitGrid::new(shape.c, shape.h, shape.w, bits).unwrap();
            prop_assert_eq!(majority_decode(&tampered, &shape).unwrap(), wm);
        }

        #[test]
        fn byte_packing_round_trips(k in 1usize..=64, seed in any::<u64>()) {
            let wm = Watermark::random(k, seed);
            let bytes = wm.to_bytes();
            prop_assert_eq!(Watermark::from_bytes(&bytes, k).unwrap(), wm);
        }
    }
}
