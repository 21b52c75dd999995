//! Implementations behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use latentmark::cipher::{self, Keystream, Scheme, WatermarkKey};
use latentmark::distort::{self, DistortionKind};
use latentmark::latent::{extract_signs, inject_signs, sample_gaussian, Latent};
use latentmark::osi::{self, OsiModel};
use latentmark::pipeline::{self, Image, Pipeline};
use latentmark::rng::mix_seed;
use latentmark::stats;
use latentmark::wmcodec::{majority_decode, repeat_expand, soft_decode, LatentShape, Watermark};
use latentmark::ReportRow;

use crate::config::{ExperimentConfig, ExtractorSpec, Manifest, ManifestItem};
use crate::report::{self, FprPoint, ResultRow};

/// Deterministic key file from a seed.
pub fn keygen(out: &Path, scheme: Scheme, seed: u64) -> Result<()> {
    let key = WatermarkKey::from_seed(seed, scheme);
    key.save(out)
        .with_context(|| format!("writing key file {}", out.display()))?;
    Ok(())
}

/// Synthesize the watermark-free triplet dataset and a JSON sidecar
/// recording exactly how it was produced.
pub fn synth_data(config: &ExperimentConfig, out: &Path, seed_override: Option<u64>) -> Result<usize> {
    let seed = seed_override.unwrap_or(config.base_seed);
    let pipeline = Pipeline::new(&config.pipeline)?;
    let triplets = pipeline.synth_dataset(config.n_images, seed)?;
    pipeline::save_triplets(out, &triplets)?;
    let sidecar = serde_json::json!({
        "pipeline": config.pipeline,
        "seed": seed,
        "count": triplets.len(),
    });
    fs::write(
        sidecar_path(out),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(triplets.len())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    out.with_file_name(name)
}

/// Embed one watermark into `n_images` generations and persist images,
/// latents and the ground-truth manifest.
pub fn embed(
    config: &ExperimentConfig,
    watermark_hex: Option<&str>,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<Manifest> {
    let base_seed = seed_override.unwrap_or(config.base_seed);
    let shape = config.shape()?;
    let k = shape.payload_len();
    let wm = match watermark_hex {
        Some(hex_str) => {
            let bytes = hex::decode(hex_str).context("watermark must be hex")?;
            Watermark::from_bytes(&bytes, k)?
        }
        None => Watermark::random(k, mix_seed(base_seed, 0x3a7e)),
    };
    let key = WatermarkKey::load(&config.key_path)
        .with_context(|| format!("loading key {}", config.key_path.display()))?;
    let pipeline = Pipeline::new(&config.pipeline)?;
    let grid = repeat_expand(&wm, &shape)?;
    let ks = cipher::keystream(&key, shape.elements())?;
    let mask = cipher::encrypt_mask(&grid, &ks)?;

    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("latents"))?;

    let items: Vec<ManifestItem> = (0..config.n_images)
        .into_par_iter()
        .map(|i| -> Result<ManifestItem> {
            let seed = base_seed.wrapping_add(i as u64);
            let z_tilde = sample_gaussian(&shape, seed);
            let z_t = inject_signs(&z_tilde, &mask)?;
            let (z0, image) = pipeline.generate(&z_t)?;
            let image_rel = PathBuf::from(format!("images/im_{i:05}.img"));
            let z0_rel = PathBuf::from(format!("latents/z0_{i:05}.lat"));
            let zt_rel = PathBuf::from(format!("latents/zt_{i:05}.lat"));
            image.save(&out_dir.join(&image_rel))?;
            z0.save(&out_dir.join(&z0_rel))?;
            z_t.save(&out_dir.join(&zt_rel))?;
            Ok(ManifestItem {
                index: i,
                seed,
                image: image_rel,
                z0: z0_rel,
                z_t: zt_rel,
            })
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        watermark_hex: hex::encode(wm.to_bytes()),
        k,
        f_hw: config.f_hw,
        base_seed,
        items,
        config: config.clone(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

enum LoadedExtractor {
    MultiStep { steps: usize },
    Osi { model: OsiModel },
    Frozen,
}

impl LoadedExtractor {
    fn from_spec(spec: &ExtractorSpec, shape: &LatentShape) -> Result<Self> {
        Ok(match spec {
            ExtractorSpec::MultiStep { steps } => {
                if *steps == 0 {
                    bail!("multi_step extractor needs steps >= 1");
                }
                LoadedExtractor::MultiStep { steps: *steps }
            }
            ExtractorSpec::Osi { checkpoint } => {
                let model = OsiModel::load(checkpoint)
                    .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
                if model.channels() != shape.c {
                    bail!(
                        "checkpoint has {} channels, pipeline has {}",
                        model.channels(),
                        shape.c
                    );
                }
                LoadedExtractor::Osi { model }
            }
            ExtractorSpec::Frozen => LoadedExtractor::Frozen,
        })
    }

    /// Recover the payload from a (possibly distorted) image. Returns the
    /// decoded watermark and, for the multi-step path, the per-step decoded
    /// accuracies against `wm`.
    fn extract(
        &self,
        pipeline: &Pipeline,
        shape: &LatentShape,
        ks: &Keystream,
        wm: &Watermark,
        image: &Image,
    ) -> Result<(Watermark, Option<Vec<f64>>)> {
        match self {
            LoadedExtractor::MultiStep { steps } => {
                let trace = pipeline.invert_multistep_trace(image, *steps)?;
                let mut step_accs = Vec::with_capacity(trace.len());
                let mut final_wm = None;
                for (idx, z) in trace.iter().enumerate() {
                    let mask_hat = extract_signs(z)?;
                    let grid_hat = cipher::decrypt_mask(&mask_hat, ks)?;
                    let decoded = majority_decode(&grid_hat, shape)?;
                    step_accs.push(stats::bit_accuracy(wm, &decoded)?);
                    if idx == trace.len() - 1 {
                        final_wm = Some(decoded);
                    }
                }
                Ok((final_wm.expect("trace is non-empty"), Some(step_accs)))
            }
            LoadedExtractor::Osi { model } => {
                let (probs, _) = model.predict(pipeline, image)?;
                let soft = cipher::decrypt_soft(&probs, ks)?;
                Ok((soft_decode(&soft, shape)?, None))
            }
            LoadedExtractor::Frozen => {
                let z0_hat = pipeline.encode(image)?;
                let mask_hat = extract_signs(&z0_hat)?;
                let grid_hat = cipher::decrypt_mask(&mask_hat, ks)?;
                Ok((majority_decode(&grid_hat, shape)?, None))
            }
        }
    }
}

/// Evaluate the configured extractor against every distortion row: apply,
/// extract, decode, and aggregate accuracy / TPR / logAUC / capacity rates.
/// Emits `report.csv`, `report.json` and, for the multi-step extractor,
/// `steps.csv` with per-step accuracy curves.
pub fn evaluate(config: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<Vec<ResultRow>> {
    let manifest = Manifest::load(data_dir)?;
    let shape = config.shape()?;
    let k = shape.payload_len();
    if manifest.k != k || manifest.f_hw != config.f_hw {
        bail!(
            "manifest was embedded with k={} f_hw={}, config expects k={k} f_hw={}",
            manifest.k,
            manifest.f_hw,
            config.f_hw
        );
    }
    let wm = Watermark::from_bytes(&hex::decode(&manifest.watermark_hex)?, k)?;
    let key = WatermarkKey::load(&config.key_path)?;
    let ks = cipher::keystream(&key, shape.elements())?;
    let pipeline = Pipeline::new(&config.pipeline)?;
    let extractor = LoadedExtractor::from_spec(&config.extractor, &shape)?;
    let method = config.extractor.id();

    let images: Vec<Image> = manifest
        .items
        .par_iter()
        .map(|item| Ok(Image::load(&data_dir.join(&item.image))?))
        .collect::<Result<_>>()?;

    fs::create_dir_all(out_dir)?;
    let suite = config.suite();
    let mut rows: Vec<ResultRow> = Vec::with_capacity(suite.len() + 1);
    let mut step_curves: Vec<(String, Vec<f64>)> = Vec::new();

    for spec in &suite {
        let per_item: Vec<(f64, f64, Option<Vec<f64>>)> = images
            .par_iter()
            .enumerate()
            .map(|(i, image)| -> Result<(f64, f64, Option<Vec<f64>>)> {
                let item_spec = spec.reseeded(mix_seed(spec.seed, i as u64));
                let distorted = distort::apply(image, &item_spec)?;
                let start = Instant::now();
                let (wm_hat, step_accs) =
                    extractor.extract(&pipeline, &shape, &ks, &wm, &distorted)?;
                let elapsed = start.elapsed().as_secs_f64();
                let acc = stats::bit_accuracy(&wm, &wm_hat)?;
                Ok((acc, elapsed, step_accs))
            })
            .collect::<Result<_>>()?;

        let accs: Vec<f64> = per_item.iter().map(|r| r.0).collect();
        let wall: f64 = per_item.iter().map(|r| r.1).sum::<f64>() / accs.len() as f64;
        if let Some(len) = per_item[0].2.as_ref().map(Vec::len) {
            let mut means = vec![0.0; len];
            for (_, _, curve) in &per_item {
                for (m, v) in means.iter_mut().zip(curve.as_ref().unwrap()) {
                    *m += v / accs.len() as f64;
                }
            }
            step_curves.push((spec.label().to_string(), means));
        }
        rows.push(aggregate_row(&method, config, &shape, spec.label(), &accs, wall)?);
    }

    // The "Adv." row is the unweighted mean over the non-Clean rows.
    let adv: Vec<&ResultRow> = rows
        .iter()
        .zip(&suite)
        .filter(|(_, s)| s.kind != DistortionKind::Identity)
        .map(|(r, _)| r)
        .collect();
    if !adv.is_empty() {
        let mean = |f: &dyn Fn(&ResultRow) -> f64| -> f64 {
            adv.iter().map(|r| f(r)).sum::<f64>() / adv.len() as f64
        };
        let adv_acc = mean(&|r| r.row.acc);
        let rates = stats::bsc_rates(adv_acc, &shape)?;
        let fpr_points: Vec<FprPoint> = (0..config.fpr_targets.len())
            .map(|t| FprPoint {
                fpr: config.fpr_targets[t],
                tau: adv[0].fpr_points[t].tau,
                tpr: adv.iter().map(|r| r.fpr_points[t].tpr).sum::<f64>() / adv.len() as f64,
            })
            .collect();
        rows.push(ResultRow {
            row: ReportRow {
                method: method.clone(),
                f_hw: config.f_hw,
                distortion: "Adv.".to_string(),
                acc: adv_acc,
                tpr: fpr_points[0].tpr,
                tau: fpr_points[0].tau,
                payload_rate: rates.payload_rate,
                log2_users: rates.log2_users,
            },
            log_auc: mean(&|r| r.log_auc),
            wall_clock_s: mean(&|r| r.wall_clock_s),
            fpr_points,
        });
    }

    report::write_csv(&out_dir.join("report.csv"), &rows, &config.fpr_targets)?;
    report::write_json(&out_dir.join("report.json"), &rows)?;
    if !step_curves.is_empty() {
        let mut csv = String::from("distortion,step,mean_acc\n");
        for (label, curve) in &step_curves {
            for (step, acc) in curve.iter().enumerate() {
                csv.push_str(&format!("{label},{step},{acc:.6}\n"));
            }
        }
        fs::write(out_dir.join("steps.csv"), csv)?;
    }
    Ok(rows)
}

fn aggregate_row(
    method: &str,
    config: &ExperimentConfig,
    shape: &LatentShape,
    distortion: &str,
    accs: &[f64],
    wall_clock_s: f64,
) -> Result<ResultRow> {
    let k = shape.payload_len();
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    let fpr_points: Vec<FprPoint> = config
        .fpr_targets
        .iter()
        .map(|&fpr| -> Result<FprPoint> {
            let (tau, _) = stats::threshold_for_fpr(k, fpr)?;
            Ok(FprPoint {
                fpr,
                tau,
                tpr: stats::tpr_at_fpr(accs, k, fpr)?,
            })
        })
        .collect::<Result<_>>()?;
    let rates = stats::bsc_rates(mean_acc, shape)?;
    Ok(ResultRow {
        row: ReportRow {
            method: method.to_string(),
            f_hw: config.f_hw,
            distortion: distortion.to_string(),
            acc: mean_acc,
            tpr: fpr_points[0].tpr,
            tau: fpr_points[0].tau,
            payload_rate: rates.payload_rate,
            log2_users: rates.log2_users,
        },
        log_auc: stats::log_auc(accs, k)?,
        wall_clock_s,
        fpr_points,
    })
}

/// Train the one-step extractor on a stored dataset; writes the checkpoint
/// and a loss-history CSV next to it.
pub fn train(
    config: &ExperimentConfig,
    dataset: &Path,
    out_checkpoint: &Path,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    let mut tc = config
        .train
        .ok_or_else(|| anyhow!("config has no train section"))?;
    if let Some(seed) = seed_override {
        tc.seed = seed;
    }
    let data = pipeline::load_triplets(dataset)?;
    let pipeline = Pipeline::new(&config.pipeline)?;
    let mut model = OsiModel::init(config.pipeline.shape.c, mix_seed(tc.seed, 0x0511));
    let history = osi::train(&mut model, &data, &tc, &pipeline)?;
    model.save(out_checkpoint)?;
    let history_path = {
        let mut name = out_checkpoint.file_name().unwrap_or_default().to_os_string();
        name.push(".history.csv");
        out_checkpoint.with_file_name(name)
    };
    osi::write_history_csv(&history_path, &history)?;
    Ok(history_path)
}

/// Capacity and payload figures for a measured accuracy.
pub fn capacity(acc: f64, f_hw: usize, c: usize, h: usize, w: usize) -> Result<latentmark::ChannelRates> {
    let shape = LatentShape::new(c, h, w, f_hw)?;
    Ok(stats::bsc_rates(acc, &shape)?)
}

/// Detection threshold for a payload length and FPR target.
pub fn threshold(k: usize, fpr: f64) -> Result<(f64, usize)> {
    Ok(stats::threshold_for_fpr(k, fpr)?)
}

/// Decode a watermark through the one-step path: predict probabilities,
/// decrypt them, aggregate log-odds.
pub fn osi_decode(
    model: &OsiModel,
    pipeline: &Pipeline,
    shape: &LatentShape,
    ks: &Keystream,
    image: &Image,
) -> Result<Watermark> {
    let (probs, _) = model.predict(pipeline, image)?;
    let soft = cipher::decrypt_soft(&probs, ks)?;
    Ok(soft_decode(&soft, shape)?)
}

/// Multi-step decode used by tests mirroring the evaluate path.
pub fn multistep_decode(
    pipeline: &Pipeline,
    shape: &LatentShape,
    ks: &Keystream,
    image: &Image,
    steps: usize,
) -> Result<Watermark> {
    let z_t_hat = pipeline.invert_multistep(image, steps)?;
    let mask_hat = extract_signs(&z_t_hat)?;
    let grid_hat = cipher::decrypt_mask(&mask_hat, ks)?;
    Ok(majority_decode(&grid_hat, shape)?)
}

/// Frozen (encoder-only) decode: signs of the raw encoder output.
pub fn frozen_decode(
    pipeline: &Pipeline,
    shape: &LatentShape,
    ks: &Keystream,
    image: &Image,
) -> Result<Watermark> {
    let z0_hat = pipeline.encode(image)?;
    let mask_hat = extract_signs(&z0_hat)?;
    let grid_hat = cipher::decrypt_mask(&mask_hat, ks)?;
    Ok(majority_decode(&grid_hat, shape)?)
}

/// Embed a watermark into one latent draw; shared by tests and docs.
pub fn embed_one(
    shape: &LatentShape,
    ks: &Keystream,
    wm: &Watermark,
    item_seed: u64,
) -> Result<Latent> {
    let grid = repeat_expand(wm, shape)?;
    let mask = cipher::encrypt_mask(&grid, ks)?;
    let z_tilde = sample_gaussian(shape, item_seed);
    Ok(inject_signs(&z_tilde, &mask)?)
}
