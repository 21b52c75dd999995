//! Experiment harness behind the `latentmark` binary.
//!
//! Commands are plain functions over an [`ExperimentConfig`], so integration
//! tests drive the same code paths as the CLI. Every stochastic stage derives
//! its randomness from the config's `base_seed` plus the item index, which
//! makes any emitted result row reproducible from the config file alone and
//! independent of thread count.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{ExperimentConfig, ExtractorSpec, Manifest, ManifestItem};
pub use report::{FprPoint, ResultRow};
