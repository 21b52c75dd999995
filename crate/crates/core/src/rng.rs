//! Deterministic randomness for experiments.
//!
//! Every stochastic stage in the crate draws from [`SeededRng`], a
//! counter-mode generator built on the ChaCha20 block function with an
//! explicit 64-bit seed. Streams are bit-reproducible across platforms and
//! thread counts; parallel stages get per-item seeds instead of sharing
//! generator state.

use crate::cipher::{chacha20_block, splitmix64, KEY_LEN, NONCE_LEN};

const STREAM_TAG: [u8; 4] = *b"LMK1";

#[derive(Debug, Clone)]
pub struct SeededRng {
    key: [u8; KEY_LEN],
    nonce: [u8; NONCE_LEN],
    counter: u32,
    block: [u8; 64],
    pos: usize,
    spare_gauss: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent substream of the same seed. Distinct `stream` values give
    /// decorrelated outputs; the pair fully determines the sequence.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut state = seed;
        let mut key = [0u8; KEY_LEN];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..8].copy_from_slice(&stream.to_le_bytes());
        nonce[8..].copy_from_slice(&STREAM_TAG);
        Self {
            key,
            nonce,
            counter: 0,
            block: [0u8; 64],
            pos: 64,
            spare_gauss: None,
        }
    }

    fn refill(&mut self) {
        self.block = chacha20_block(&self.key, self.counter, &self.nonce);
        self.counter = self.counter.wrapping_add(1);
        self.pos = 0;
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.pos + 8 > 64 {
            self.refill();
        }
        let word = u64::from_le_bytes(self.block[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        word
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller transform; the paired draw is cached.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gauss.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn next_bit(&mut self) -> u8 {
        (self.next_u64() & 1) as u8
    }

    /// Uniform integer in [0, n). Modulo bias is below 2^-32 for the small
    /// ranges used here (indices, pixel offsets).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        self.next_u64() % n
    }
}

/// Stateless mix of two words into a fresh seed, for deriving per-item or
/// per-epoch substreams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut state = a ^ b.rotate_left(32) ^ 0x51a5_c0de_0000_0001;
    splitmix64(&mut state)
}
