//! Experiment configuration files and the embed manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use latentmark::osi::TrainConfig;
use latentmark::pipeline::PipelineConfig;
use latentmark::wmcodec::LatentShape;
use latentmark::DistortionSpec;

fn default_fpr_targets() -> Vec<f64> {
    vec![1e-6]
}

/// One experiment: pipeline geometry, key reference, repetition factor,
/// distortion suite, extractor and seeds. JSON on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub key_path: PathBuf,
    pub f_hw: usize,
    pub n_images: usize,
    /// Empty means the default suite: Clean plus the nine standard settings.
    #[serde(default)]
    pub distortion_suite: Vec<DistortionSpec>,
    pub extractor: ExtractorSpec,
    #[serde(default = "default_fpr_targets")]
    pub fpr_targets: Vec<f64>,
    pub base_seed: u64,
    /// Training section, used by the `train` command.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.n_images == 0 {
            bail!("n_images must be >= 1");
        }
        self.shape()?;
        for fpr in &self.fpr_targets {
            if !(*fpr > 0.0 && *fpr < 1.0) {
                bail!("fpr target {fpr} must lie strictly in (0, 1)");
            }
        }
        if self.fpr_targets.is_empty() {
            bail!("at least one fpr target is required");
        }
        Ok(())
    }

    /// Pipeline latent grid with this experiment's repetition factor.
    pub fn shape(&self) -> Result<LatentShape> {
        Ok(self.pipeline.shape.with_f_hw(self.f_hw)?)
    }

    /// Distortion rows evaluated by `evaluate`, Clean first.
    pub fn suite(&self) -> Vec<DistortionSpec> {
        if self.distortion_suite.is_empty() {
            let mut suite = vec![DistortionSpec::identity()];
            suite.extend(DistortionSpec::adversarial_suite(self.base_seed));
            suite
        } else {
            self.distortion_suite.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorSpec {
    MultiStep { steps: usize },
    Osi { checkpoint: PathBuf },
    Frozen,
}

impl ExtractorSpec {
    pub fn id(&self) -> String {
        match self {
            ExtractorSpec::MultiStep { steps } => format!("multistep{steps}"),
            ExtractorSpec::Osi { .. } => "osi".to_string(),
            ExtractorSpec::Frozen => "frozen".to_string(),
        }
    }
}

/// Ground truth written by `embed`: the payload, per-item seeds and the
/// file layout of images and latents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub watermark_hex: String,
    pub k: usize,
    pub f_hw: usize,
    pub base_seed: u64,
    pub items: Vec<ManifestItem>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub seed: u64,
    pub image: PathBuf,
    pub z0: PathBuf,
    pub z_t: PathBuf,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
