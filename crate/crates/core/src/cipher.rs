//! Keystream generation and sign-mask encryption.
//!
//! Two keystream schemes are supported: ChaCha20 (RFC 8439 block function,
//! block counter starting at 0) and a simple XOR pad realized as a keyed
//! deterministic generator (splitmix64 over an FNV-1a fold of key and nonce).
//! Keystream bytes expand to bits MSB-first. Encryption XORs the repeated
//! watermark grid with the keystream and maps bits to signs, `2e - 1`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::SignMask;
use crate::wmcodec::{BitGrid, SoftBits};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
/// Key file layout: 32-byte key, 12-byte nonce, 1-byte scheme tag.
pub const KEY_FILE_LEN: usize = KEY_LEN + NONCE_LEN + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ChaCha20,
    XorPad,
}

impl Scheme {
    pub fn tag(self) -> u8 {
        match self {
            Scheme::ChaCha20 => 0,
            Scheme::XorPad => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Scheme::ChaCha20),
            1 => Ok(Scheme::XorPad),
            t => Err(Error::Format(format!("unknown cipher scheme tag {t}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::ChaCha20 => write!(f, "chacha20"),
            Scheme::XorPad => write!(f, "xorpad"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chacha20" => Ok(Scheme::ChaCha20),
            "xorpad" | "xor" => Ok(Scheme::XorPad),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheme '{other}' (expected chacha20 or xorpad)"
            ))),
        }
    }
}

/// Cipher key plus nonce and scheme selector. One key, one nonce, one mask
/// stream; there is no counter reuse across watermarks by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatermarkKey {
    key: [u8; KEY_LEN],
    nonce: [u8; NONCE_LEN],
    scheme: Scheme,
}

impl WatermarkKey {
    pub fn new(key: [u8; KEY_LEN], nonce: [u8; NONCE_LEN], scheme: Scheme) -> Self {
        Self { key, nonce, scheme }
    }

    /// Deterministic key expansion from a 64-bit seed (splitmix64 chain).
    pub fn from_seed(seed: u64, scheme: Scheme) -> Self {
        let mut state = seed;
        let mut key = [0u8; KEY_LEN];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut nonce = [0u8; NONCE_LEN];
        let a = splitmix64(&mut state).to_le_bytes();
        let b = splitmix64(&mut state).to_le_bytes();
        nonce[..8].copy_from_slice(&a);
        nonce[8..].copy_from_slice(&b[..4]);
        Self { key, nonce, scheme }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn key_bytes(&self) -> &[u8; KEY_LEN] {
        &self.key
    }

    pub fn nonce_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.nonce
    }

    pub fn to_bytes(&self) -> [u8; KEY_FILE_LEN] {
        let mut out = [0u8; KEY_FILE_LEN];
        out[..KEY_LEN].copy_from_slice(&self.key);
        out[KEY_LEN..KEY_LEN + NONCE_LEN].copy_from_slice(&self.nonce);
        out[KEY_FILE_LEN - 1] = self.scheme.tag();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != KEY_FILE_LEN {
            return Err(Error::Format(format!(
                "key file must be {KEY_FILE_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let mut key = [0u8; KEY_LEN];
        key.copy_from_slice(&bytes[..KEY_LEN]);
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&bytes[KEY_LEN..KEY_LEN + NONCE_LEN]);
        let scheme = Scheme::from_tag(bytes[KEY_FILE_LEN - 1])?;
        Ok(Self { key, nonce, scheme })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A deterministic bit stream derived from a key; one bit per latent position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keystream {
    bits: Vec<u8>,
}

impl Keystream {
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

/// Generates `n_bits` keystream bits for the key's scheme. The stream is a
/// pure function of (key, nonce, n_bits).
pub fn keystream(key: &WatermarkKey, n_bits: usize) -> Result<Keystream> {
    if n_bits == 0 {
        return Err(Error::InvalidArgument("keystream length must be >= 1".into()));
    }
    let n_bytes = n_bits.div_ceil(8);
    let bytes = match key.scheme {
        Scheme::ChaCha20 => chacha20_stream(&key.key, &key.nonce, n_bytes),
        Scheme::XorPad => xorpad_stream(&key.key, &key.nonce, n_bytes),
    };
    let mut bits = Vec::with_capacity(n_bits);
    'outer: for byte in bytes {
        for shift in (0..8).rev() {
            bits.push((byte >> shift) & 1);
            if bits.len() == n_bits {
                break 'outer;
            }
        }
    }
    Ok(Keystream { bits })
}

/// XOR the repeated watermark with the keystream and lift bits to signs.
pub fn encrypt_mask(grid: &BitGrid, ks: &Keystream) -> Result<SignMask> {
    if grid.len() != ks.len() {
        return Err(Error::InvalidArgument(format!(
            "keystream length {} does not match grid length {}",
            ks.len(),
            grid.len()
        )));
    }
    let (c, h, w) = grid.dims();
    let values = grid
        .bits()
        .iter()
        .zip(ks.bits())
        .map(|(&g, &k)| f64::from(2 * (g ^ k)) - 1.0)
        .collect();
    SignMask::new(c, h, w, values)
}

/// Inverse of [`encrypt_mask`]: recover the bit grid from an extracted mask.
pub fn decrypt_mask(mask: &SignMask, ks: &Keystream) -> Result<BitGrid> {
    if mask.len() != ks.len() {
        return Err(Error::InvalidArgument(format!(
            "keystream length {} does not match mask length {}",
            ks.len(),
            mask.len()
        )));
    }
    let (c, h, w) = mask.dims();
    let mut bits = Vec::with_capacity(mask.len());
    for (&v, &k) in mask.values().iter().zip(ks.bits()) {
        let e = if v == 1.0 {
            1u8
        } else if v == -1.0 {
            0u8
        } else {
            return Err(Error::InvalidArgument(format!(
                "mask entry {v} is not in {{-1, +1}}"
            )));
        };
        bits.push(e ^ k);
    }
    BitGrid::new(c, h, w, bits)
}

/// Soft analogue of [`decrypt_mask`]: where the keystream bit is 1 the
/// positive-sign probability flips to `1 - p`.
pub fn decrypt_soft(soft: &SoftBits, ks: &Keystream) -> Result<SoftBits> {
    if soft.len() != ks.len() {
        return Err(Error::InvalidArgument(format!(
            "keystream length {} does not match prob length {}",
            ks.len(),
            soft.len()
        )));
    }
    let probs = soft
        .probs()
        .iter()
        .zip(ks.bits())
        .map(|(&p, &k)| if k == 1 { 1.0 - p } else { p })
        .collect();
    SoftBits::new(probs)
}

// ---------------------------------------------------------------------------
// ChaCha20 block function (RFC 8439)
// ---------------------------------------------------------------------------

const CHACHA_CONSTANTS: [u32; 4] = [0x6170_7865, 0x3320_646e, 0x7962_2d32, 0x6b20_6574];

#[inline]
fn quarter_round(s: &mut [u32; 16], a: usize, b: usize, c: usize, d: usize) {
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(16);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(12);
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(8);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(7);
}

/// 20-round ChaCha block function, serialized little-endian.
pub(crate) fn chacha20_block(key: &[u8; KEY_LEN], counter: u32, nonce: &[u8; NONCE_LEN]) -> [u8; 64] {
    let mut state = [0u32; 16];
    state[..4].copy_from_slice(&CHACHA_CONSTANTS);
    for (i, chunk) in key.chunks_exact(4).enumerate() {
        state[4 + i] = u32::from_le_bytes(chunk.try_into().unwrap());
    }
    state[12] = counter;
    for (i, chunk) in nonce.chunks_exact(4).enumerate() {
        state[13 + i] = u32::from_le_bytes(chunk.try_into().unwrap());
    }

    let mut work = state;
    for _ in 0..10 {
        quarter_round(&mut work, 0, 4, 8, 12);
        quarter_round(&mut work, 1, 5, 9, 13);
        quarter_round(&mut work, 2, 6, 10, 14);
        quarter_round(&mut work, 3, 7, 11, 15);
        quarter_round(&mut work, 0, 5, 10, 15);
        quarter_round(&mut work, 1, 6, 11, 12);
        quarter_round(&mut work, 2, 7, 8, 13);
        quarter_round(&mut work, 3, 4, 9, 14);
    }

    let mut out = [0u8; 64];
    for (i, chunk) in out.chunks_exact_mut(4).enumerate() {
        chunk.copy_from_slice(&work[i].wrapping_add(state[i]).to_le_bytes());
    }
    out
}

fn chacha20_stream(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], n_bytes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n_bytes);
    let mut counter = 0u32;
    while out.len() < n_bytes {
        let block = chacha20_block(key, counter, nonce);
        let take = (n_bytes - out.len()).min(64);
        out.extend_from_slice(&block[..take]);
        counter = counter.wrapping_add(1);
    }
    out
}

// ---------------------------------------------------------------------------
// XOR pad: keyed splitmix64 stream
// ---------------------------------------------------------------------------

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn xorpad_stream(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], n_bytes: usize) -> Vec<u8> {
    let mut material = Vec::with_capacity(KEY_LEN + NONCE_LEN);
    material.extend_from_slice(key);
    material.extend_from_slice(nonce);
    let mut state = fnv1a64(&material);
    let mut out = Vec::with_capacity(n_bytes);
    while out.len() < n_bytes {
        let word = splitmix64(&mut state).to_le_bytes();
        let take = (n_bytes - out.len()).min(8);
        out.extend_from_slice(&word[..take]);
    }
    out
}
