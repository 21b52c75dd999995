//! The learnable one-step extractor.
//!
//! A per-channel affine adapter (psi) sits after the fixed encoder and a
//! small sign classifier (theta: two 3x3 convolutions, c -> 32 -> c, ReLU
//! between, sigmoid output) predicts the probability of a positive latent
//! sign at every position in a single pass. Training minimizes
//! `BCE(p, y) + MSE(z0_hat, z0)` with unit weights, where the labels
//! `y = (sign(z_T) + 1) / 2` come from the stored initial noise, so no
//! watermark key is ever needed for training. All gradients are analytic and
//! updates use Adam. Three gradient-routing strategies are supported:
//! the default routes BCE into both theta and psi (MSE always into psi
//! alone), "detach" cuts the BCE path at z0_hat, and "decouple" first trains
//! psi on MSE then freezes it and trains theta on BCE.
//!
//! psi initializes to the identity and the final convolution to zero, so an
//! untrained model starts at probability 0.5 everywhere instead of
//! collapsing.

use std::fs;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::distort::{self, DistortionSpec};
use crate::error::{Error, Result};
use crate::latent::{Latent, SignMask};
use crate::pipeline::{Image, Pipeline, Triplet};
use crate::rng::{mix_seed, SeededRng};
use crate::wmcodec::{SoftBits, PROB_EPS};

pub const HIDDEN_CHANNELS: usize = 32;
const KERNEL: usize = 3;
const CHECKPOINT_MAGIC: &[u8; 8] = b"LMKOSI01";
const CHECKPOINT_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Gain of the hand-set pass-through classifier; any positive value leaves
/// the decision `sign(p - 0.5) = sign(z0_hat)` unchanged.
const PASSTHROUGH_GAIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Default,
    Detach,
    Decouple,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub aug_prob: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 11,
            batch: 16,
            lr: 1e-4,
            aug_prob: 0.5,
            strategy: Strategy::Default,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(Error::InvalidArgument("aug_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    PsiScale,
    PsiBias,
    ConvW1,
    ConvB1,
    ConvW2,
    ConvB2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::PsiScale,
        ParamGroup::PsiBias,
        ParamGroup::ConvW1,
        ParamGroup::ConvB1,
        ParamGroup::ConvW2,
        ParamGroup::ConvB2,
    ];

    fn is_psi(self) -> bool {
        matches!(self, ParamGroup::PsiScale | ParamGroup::PsiBias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsiModel {
    c: usize,
    psi_scale: Vec<f64>,
    psi_bias: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Per-group gradients, same layout as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    psi_scale: Vec<f64>,
    psi_bias: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
}

/// Gradient routing for one update step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GradMode {
    /// BCE into theta and psi, MSE into psi.
    Full,
    /// BCE into theta only (cut at z0_hat), MSE into psi.
    DetachBce,
    /// MSE into psi only; theta untouched (decouple stage 1).
    MseOnly,
    /// BCE into theta only; psi frozen (decouple stage 2).
    BceOnly,
    /// BCE into theta and psi, no MSE term (augmented sample under the
    /// default strategy: a distorted image has no latent-consistency target).
    BceBoth,
}

impl GradMode {
    fn has_mse(self) -> bool {
        matches!(self, GradMode::Full | GradMode::DetachBce | GradMode::MseOnly)
    }

    fn has_bce(self) -> bool {
        !matches!(self, GradMode::MseOnly)
    }
}

impl OsiModel {
    /// Trainable initialization: identity psi, small seeded first layer,
    /// zero final layer so every probability starts at 0.5.
    pub fn init(c: usize, seed: u64) -> Self {
        let mut rng = SeededRng::with_stream(seed, 0x0051);
        let fan_in = (c * KERNEL * KERNEL) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w1 = (0..HIDDEN_CHANNELS * c * KERNEL * KERNEL)
            .map(|_| std * rng.next_gaussian())
            .collect();
        Self {
            c,
            psi_scale: vec![1.0; c],
            psi_bias: vec![0.0; c],
            w1,
            b1: vec![0.0; HIDDEN_CHANNELS],
            w2: vec![0.0; c * HIDDEN_CHANNELS * KERNEL * KERNEL],
            b2: vec![0.0; c],
        }
    }

    /// Hand-set classifier that routes `z0_hat` straight through the sigmoid:
    /// the decision equals `sign(z0_hat)`. ReLU kills negative values, so each
    /// input channel gets a +/- pair of hidden channels recombined by the
    /// second layer.
    pub fn passthrough(c: usize) -> Result<Self> {
        if 2 * c > HIDDEN_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "passthrough needs 2*c <= {HIDDEN_CHANNELS}, got c = {c}"
            )));
        }
        let mut model = Self::init(c, 0);
        model.w1.fill(0.0);
        let center = (KERNEL * KERNEL) / 2;
        for i in 0..c {
            model.w1[((2 * i) * c + i) * KERNEL * KERNEL + center] = 1.0;
            model.w1[((2 * i + 1) * c + i) * KERNEL * KERNEL + center] = -1.0;
            model.w2[(i * HIDDEN_CHANNELS + 2 * i) * KERNEL * KERNEL + center] = PASSTHROUGH_GAIN;
            model.w2[(i * HIDDEN_CHANNELS + 2 * i + 1) * KERNEL * KERNEL + center] =
                -PASSTHROUGH_GAIN;
        }
        Ok(model)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn param_group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::PsiScale => &self.psi_scale,
            ParamGroup::PsiBias => &self.psi_bias,
            ParamGroup::ConvW1 => &self.w1,
            ParamGroup::ConvB1 => &self.b1,
            ParamGroup::ConvW2 => &self.w2,
            ParamGroup::ConvB2 => &self.b2,
        }
    }

    pub fn param_group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::PsiScale => &mut self.psi_scale,
            ParamGroup::PsiBias => &mut self.psi_bias,
            ParamGroup::ConvW1 => &mut self.w1,
            ParamGroup::ConvB1 => &mut self.b1,
            ParamGroup::ConvW2 => &mut self.w2,
            ParamGroup::ConvB2 => &mut self.b2,
        }
    }

    /// One encoder pass, one classifier pass: probabilities of positive signs
    /// and the adapted latent `z0_hat = psi(encode(image))`.
    pub fn predict(&self, pipeline: &Pipeline, image: &Image) -> Result<(SoftBits, Latent)> {
        let z_raw = pipeline.encode(image)?;
        self.predict_from_encoded(&z_raw)
    }

    /// Classifier pass on an already-encoded latent.
    pub fn predict_from_encoded(&self, z_raw: &Latent) -> Result<(SoftBits, Latent)> {
        let (c, h, w) = z_raw.dims();
        if c != self.c {
            return Err(Error::ShapeMismatch(format!(
                "model has {} channels, latent has {c}",
                self.c
            )));
        }
        let fwd = self.forward(z_raw.values(), h, w);
        let z0_hat = Latent::new(c, h, w, fwd.psi_out.clone())?;
        Ok((SoftBits::new(fwd.probs)?, z0_hat))
    }

    fn forward(&self, z_raw: &[f64], h: usize, w: usize) -> Forward {
        counters::record_classifier_pass();
        let plane = h * w;
        let mut psi_out = vec![0.0; z_raw.len()];
        for ch in 0..self.c {
            let (s, b) = (self.psi_scale[ch], self.psi_bias[ch]);
            for i in 0..plane {
                psi_out[ch * plane + i] = s * z_raw[ch * plane + i] + b;
            }
        }
        let h_pre = conv_forward(&psi_out, self.c, h, w, &self.w1, &self.b1, HIDDEN_CHANNELS);
        let h_act: Vec<f64> = h_pre.iter().map(|&v| v.max(0.0)).collect();
        let logits = conv_forward(&h_act, HIDDEN_CHANNELS, h, w, &self.w2, &self.b2, self.c);
        let probs = logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
        Forward {
            psi_out,
            h_pre,
            h_act,
            probs,
        }
    }

    /// BCE + MSE on one triplet, without augmentation.
    pub fn loss(&self, pipeline: &Pipeline, triplet: &Triplet) -> Result<LossParts> {
        self.loss_on_image(pipeline, &triplet.image, &triplet.z0, &triplet.z_t)
    }

    /// Loss and analytic gradients of the joint objective on one unaugmented
    /// triplet, routed as in the default strategy (BCE into theta and psi,
    /// MSE into psi).
    pub fn loss_and_gradients(
        &self,
        pipeline: &Pipeline,
        triplet: &Triplet,
    ) -> Result<(LossParts, Gradients)> {
        self.backprop(
            pipeline,
            &triplet.image,
            &triplet.z0,
            &triplet.z_t,
            GradMode::Full,
            true,
        )
    }

    fn loss_on_image(
        &self,
        pipeline: &Pipeline,
        image: &Image,
        z0: &Latent,
        z_t: &Latent,
    ) -> Result<LossParts> {
        let z_raw = pipeline.encode(image)?;
        let (_, h, w) = z_raw.dims();
        let fwd = self.forward(z_raw.values(), h, w);
        Ok(loss_from_forward(&fwd, z0.values(), z_t.values()))
    }

    /// Loss and analytic gradients for one sample. `mse_target` is false for
    /// augmented samples, whose distorted encoding has no latent-consistency
    /// target: the MSE is then neither optimized nor reported. Reported
    /// losses otherwise measure both terms even when the routing updates only
    /// one of them, so histories stay comparable across strategies.
    fn backprop(
        &self,
        pipeline: &Pipeline,
        image: &Image,
        z0: &Latent,
        z_t: &Latent,
        mode: GradMode,
        mse_target: bool,
    ) -> Result<(LossParts, Gradients)> {
        let z_raw = pipeline.encode(image)?;
        let (_, h, w) = z_raw.dims();
        let fwd = self.forward(z_raw.values(), h, w);
        let full = loss_from_forward(&fwd, z0.values(), z_t.values());
        let mse = if mse_target { full.mse } else { 0.0 };
        let parts = LossParts {
            total: full.bce + mse,
            bce: full.bce,
            mse,
        };
        let n = fwd.probs.len() as f64;
        let mut grads = Gradients::zeros_like(self);

        if mode.has_bce() {
            // dL_BCE/dlogit = (p - y) / n. The loss clips p to
            // [PROB_EPS, 1 - PROB_EPS], so a saturated position contributes a
            // constant to the objective and its true gradient is zero.
            let dlogits: Vec<f64> = fwd
                .probs
                .iter()
                .zip(z_t.values())
                .map(|(&p, &zt)| {
                    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                        return 0.0;
                    }
                    let y = if zt < 0.0 { 0.0 } else { 1.0 };
                    (p - y) / n
                })
                .collect();
            let dh_act = conv_backward(
                &fwd.h_act,
                HIDDEN_CHANNELS,
                h,
                w,
                &self.w2,
                self.c,
                &dlogits,
                &mut grads.w2,
                &mut grads.b2,
                true,
            )
            .expect("dinput requested");
            let dh_pre: Vec<f64> = dh_act
                .iter()
                .zip(&fwd.h_pre)
                .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
                .collect();
            let need_dpsi_from_bce = matches!(mode, GradMode::Full | GradMode::BceBoth);
            let dpsi_bce = conv_backward(
                &fwd.psi_out,
                self.c,
                h,
                w,
                &self.w1,
                HIDDEN_CHANNELS,
                &dh_pre,
                &mut grads.w1,
                &mut grads.b1,
                need_dpsi_from_bce,
            );
            if let Some(dpsi) = dpsi_bce {
                accumulate_psi_grads(&mut grads, &dpsi, z_raw.values(), h * w);
            }
        }

        if mode.has_mse() {
            // dL_MSE/dz0_hat = 2 (z0_hat - z0) / n.
            let plane = h * w;
            for ch in 0..self.c {
                let mut ds = 0.0;
                let mut db = 0.0;
                for i in 0..plane {
                    let idx = ch * plane + i;
                    let g = 2.0 * (fwd.psi_out[idx] - z0.values()[idx]) / n;
                    ds += g * z_raw.values()[idx];
                    db += g;
                }
                grads.psi_scale[ch] += ds;
                grads.psi_bias[ch] += db;
            }
        }

        Ok((parts, grads))
    }

    /// Versioned binary checkpoint: header, layer shapes, f32 parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.c as u32).to_le_bytes());
        out.extend_from_slice(&(HIDDEN_CHANNELS as u32).to_le_bytes());
        for g in ParamGroup::ALL {
            for &v in self.param_group(g) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)?;
        let mut header = [0u8; 20];
        file.read_exact(&mut header)?;
        if &header[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "{}: not a model checkpoint",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let c = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let hidden = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        if hidden != HIDDEN_CHANNELS {
            return Err(Error::Format(format!(
                "checkpoint hidden width {hidden} does not match build {HIDDEN_CHANNELS}"
            )));
        }
        let mut model = Self::init(c, 0);
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        let expected: usize = ParamGroup::ALL
            .iter()
            .map(|&g| model.param_group(g).len())
            .sum();
        if raw.len() != 4 * expected {
            return Err(Error::Format("checkpoint payload length mismatch".into()));
        }
        let mut cursor = 0;
        for g in ParamGroup::ALL {
            let group = model.param_group_mut(g);
            for v in group.iter_mut() {
                *v = f64::from(f32::from_le_bytes(
                    raw[cursor..cursor + 4].try_into().unwrap(),
                ));
                cursor += 4;
            }
        }
        Ok(model)
    }
}

struct Forward {
    psi_out: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    probs: Vec<f64>,
}

fn loss_from_forward(fwd: &Forward, z0: &[f64], z_t: &[f64]) -> LossParts {
    let n = fwd.probs.len() as f64;
    let mut bce = 0.0;
    for (&p, &zt) in fwd.probs.iter().zip(z_t) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = if zt < 0.0 { 0.0 } else { 1.0 };
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    bce /= n;
    let mse = fwd
        .psi_out
        .iter()
        .zip(z0)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    LossParts {
        total: bce + mse,
        bce,
        mse,
    }
}

fn accumulate_psi_grads(grads: &mut Gradients, dpsi: &[f64], z_raw: &[f64], plane: usize) {
    for ch in 0..grads.psi_scale.len() {
        let mut ds = 0.0;
        let mut db = 0.0;
        for i in 0..plane {
            let idx = ch * plane + i;
            ds += dpsi[idx] * z_raw[idx];
            db += dpsi[idx];
        }
        grads.psi_scale[ch] += ds;
        grads.psi_bias[ch] += db;
    }
}

impl Gradients {
    pub fn zeros_like(model: &OsiModel) -> Self {
        Self {
            psi_scale: vec![0.0; model.psi_scale.len()],
            psi_bias: vec![0.0; model.psi_bias.len()],
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::PsiScale => &self.psi_scale,
            ParamGroup::PsiBias => &self.psi_bias,
            ParamGroup::ConvW1 => &self.w1,
            ParamGroup::ConvB1 => &self.b1,
            ParamGroup::ConvW2 => &self.w2,
            ParamGroup::ConvB2 => &self.b2,
        }
    }

    fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::PsiScale => &mut self.psi_scale,
            ParamGroup::PsiBias => &mut self.psi_bias,
            ParamGroup::ConvW1 => &mut self.w1,
            ParamGroup::ConvB1 => &mut self.b1,
            ParamGroup::ConvW2 => &mut self.w2,
            ParamGroup::ConvB2 => &mut self.b2,
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for g in ParamGroup::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for g in ParamGroup::ALL {
            for v in self.group_mut(g) {
                *v *= factor;
            }
        }
    }

    fn all_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|v| v.is_finite()))
    }
}

/// Zero-padded 3x3 convolution, NCHW with a single sample.
fn conv_forward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; out_c * plane];
    for o in 0..out_c {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..in_c {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let wbase = (o * in_c + i) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = weights[wbase + ky * KERNEL + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    for y in y_lo..y_hi {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let dst_row = y * w;
                        for x in x_lo..x_hi {
                            out_plane[dst_row + x] +=
                                wv * in_plane[src_row + ((x as isize + dx) as usize)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of the zero-padded 3x3 convolution. Accumulates weight and
/// bias gradients in place and returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_c: usize,
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    need_dinput: bool,
) -> Option<Vec<f64>> {
    let plane = h * w;
    let mut dinput = if need_dinput {
        Some(vec![0.0; in_c * plane])
    } else {
        None
    };
    for o in 0..out_c {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        dbias[o] += dout_plane.iter().sum::<f64>();
        for i in 0..in_c {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let wbase = (o * in_c + i) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    let mut dw = 0.0;
                    for y in y_lo..y_hi {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let dst_row = y * w;
                        for x in x_lo..x_hi {
                            dw += in_plane[src_row + ((x as isize + dx) as usize)]
                                * dout_plane[dst_row + x];
                        }
                    }
                    dweights[wbase + ky * KERNEL + kx] += dw;
                    if let Some(di) = dinput.as_mut() {
                        let wv = weights[wbase + ky * KERNEL + kx];
                        if wv != 0.0 {
                            let di_plane = &mut di[i * plane..(i + 1) * plane];
                            for y in y_lo..y_hi {
                                let src_row = ((y as isize + dy) as usize) * w;
                                let dst_row = y * w;
                                for x in x_lo..x_hi {
                                    di_plane[src_row + ((x as isize + dx) as usize)] +=
                                        wv * dout_plane[dst_row + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// Extraction rule of the one-step path: `m_hat = sign(p - 0.5)`, with
/// `sign(0) = +1`.
pub fn sign_mask_from_probs(probs: &SoftBits, c: usize, h: usize, w: usize) -> Result<SignMask> {
    if probs.len() != c * h * w {
        return Err(Error::ShapeMismatch(format!(
            "got {} probabilities for a {c}x{h}x{w} grid",
            probs.len()
        )));
    }
    let values = probs
        .probs()
        .iter()
        .map(|&p| if p - 0.5 < 0.0 { -1.0 } else { 1.0 })
        .collect();
    SignMask::new(c, h, w, values)
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: u64,
}

impl Adam {
    fn new(model: &OsiModel) -> Self {
        Self {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut OsiModel, grads: &Gradients, lr: f64, update_psi: bool, update_theta: bool) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for g in ParamGroup::ALL {
            let enabled = if g.is_psi() { update_psi } else { update_theta };
            if !enabled {
                continue;
            }
            let m = self.m.group_mut(g);
            let v = self.v.group_mut(g);
            let grad = grads.group(g);
            let params = model.param_group_mut(g);
            for i in 0..params.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Train in place and return the per-epoch loss history. With probability
/// `aug_prob` a sample's image receives one uniformly chosen distortion from
/// the standard nine-kind suite before encoding; such samples train the sign
/// classifier alone, since the latent-consistency target belongs to the
/// undistorted generation. Batch gradients are averaged in fixed index order,
/// so training is bit-reproducible given (seed, data order) regardless of
/// thread count.
pub fn train(
    model: &mut OsiModel,
    data: &[Triplet],
    tc: &TrainConfig,
    pipeline: &Pipeline,
) -> Result<Vec<EpochStats>> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    let suite = DistortionSpec::adversarial_suite(mix_seed(tc.seed, 0xA06));
    let stage1_epochs = tc.epochs / 2;
    let mut adam = Adam::new(model);
    let mut history = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let mode = match tc.strategy {
            Strategy::Default => GradMode::Full,
            Strategy::Detach => GradMode::DetachBce,
            Strategy::Decouple => {
                if epoch < stage1_epochs {
                    GradMode::MseOnly
                } else {
                    GradMode::BceOnly
                }
            }
        };
        let (update_psi, update_theta) = match mode {
            GradMode::Full | GradMode::DetachBce | GradMode::BceBoth => (true, true),
            GradMode::MseOnly => (true, false),
            GradMode::BceOnly => (false, true),
        };

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = SeededRng::with_stream(mix_seed(tc.seed, epoch as u64), 0x5f1e);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }

        let mut sums = LossParts {
            total: 0.0,
            bce: 0.0,
            mse: 0.0,
        };
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(tc.batch).enumerate() {
            let results: Vec<Result<(LossParts, Gradients)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let t = &data[idx];
                    let aug_seed = mix_seed(tc.seed, ((epoch as u64) << 32) ^ idx as u64);
                    let mut aug_rng = SeededRng::with_stream(aug_seed, 0xae6);
                    // Augmentation feeds the classifier only: a distorted
                    // image has no latent-consistency target, so augmented
                    // samples drop the MSE term and the MSE-only stage sees
                    // clean images.
                    let augment = mode != GradMode::MseOnly && aug_rng.next_f64() < tc.aug_prob;
                    if augment {
                        let pick = aug_rng.below(suite.len() as u64) as usize;
                        let spec = suite[pick].reseeded(mix_seed(aug_seed, pick as u64));
                        let image = distort::apply(&t.image, &spec)?;
                        let sample_mode = match mode {
                            GradMode::Full => GradMode::BceBoth,
                            GradMode::DetachBce | GradMode::BceOnly => GradMode::BceOnly,
                            GradMode::MseOnly | GradMode::BceBoth => unreachable!(),
                        };
                        model.backprop(pipeline, &image, &t.z0, &t.z_t, sample_mode, false)
                    } else {
                        model.backprop(pipeline, &t.image, &t.z0, &t.z_t, mode, true)
                    }
                })
                .collect();

            let mut batch_grads = Gradients::zeros_like(model);
            for r in results {
                let (parts, grads) = r?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        value: parts.total,
                    });
                }
                sums.total += parts.total;
                sums.bce += parts.bce;
                sums.mse += parts.mse;
                batch_grads.add_assign(&grads);
            }
            batch_grads.scale(1.0 / chunk.len() as f64);
            if !batch_grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: f64::NAN,
                });
            }
            seen += chunk.len();
            adam.step(model, &batch_grads, tc.lr, update_psi, update_theta);
        }

        history.push(EpochStats {
            epoch,
            bce: sums.bce / seen as f64,
            mse: sums.mse / seen as f64,
            total: sums.total / seen as f64,
        });
    }
    Ok(history)
}

/// Loss history CSV: epoch, bce, mse, total.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,bce,mse,total\n");
    for row in history {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            row.epoch, row.bce, row.mse, row.total
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
