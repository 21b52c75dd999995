//! Desk-scale laboratory for sign-mask latent-noise image watermarks.
//!
//! A payload is repetition-coded over a latent grid, encrypted into a +/-1
//! sign mask by a keystream, and planted as the signs of a Gaussian draw.
//! The draw feeds a small invertible generation pipeline (linear ODE flow
//! plus a fixed sigmoid decoder); extraction runs the flow backwards in
//! multiple Euler steps or through a trained one-step sign classifier.
//! Detection and capacity statistics (binomial-tail thresholds, TPR at fixed
//! FPR, logAUC, BSC capacity and payload rate) quantify the result.

pub mod cipher;
pub mod counters;
pub mod distort;
pub mod latent;
pub mod osi;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod wmcodec;

mod error;
mod linalg;

pub use error::{Error, Result};

pub use cipher::{Keystream, Scheme, WatermarkKey};
pub use distort::{BscSpec, DistortionKind, DistortionSpec};
pub use latent::{Latent, SignMask};
pub use osi::{OsiModel, Strategy, TrainConfig};
pub use pipeline::{Image, Pipeline, PipelineConfig, Triplet};
pub use stats::{ChannelRates, DetectionReport, ReportRow};
pub use wmcodec::{BitGrid, LatentShape, SoftBits, Watermark};
