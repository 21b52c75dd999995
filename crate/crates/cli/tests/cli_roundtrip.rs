//! Command-level round trips on desk-scale-in-miniature configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use latentmark::cipher::Scheme;
use latentmark::osi::{OsiModel, TrainConfig};
use latentmark::pipeline::PipelineConfig;
use latentmark::{DistortionKind, DistortionSpec, LatentShape};
use latentmark_cli::{commands, config::ExperimentConfig, config::ExtractorSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentmark"))
}

fn tiny_config(dir: &Path, quantize: bool, drift_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        pipeline: PipelineConfig {
            shape: LatentShape::new(2, 4, 4, 1).unwrap(),
            steps_gen: 8,
            drift_seed,
            decoder_seed: 77,
            image_hw: (8, 8),
            quantize,
        },
        key_path: dir.join("key.bin"),
        f_hw: 2,
        n_images: 6,
        distortion_suite: Vec::new(),
        extractor: ExtractorSpec::MultiStep { steps: 8 },
        fpr_targets: vec![1e-2, 1e-4],
        base_seed: 99,
        train: Some(TrainConfig {
            epochs: 1,
            batch: 3,
            lr: 1e-3,
            aug_prob: 0.5,
            strategy: latentmark::Strategy::Default,
            seed: 5,
        }),
    }
}

#[test]
fn keygen_is_deterministic_and_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for path in [&a, &b] {
        let status = bin()
            .args(["keygen", "--seed", "7", "--scheme", "xorpad", "--out"])
            .arg(path)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let bytes_a = fs::read(&a).unwrap();
    assert_eq!(bytes_a, fs::read(&b).unwrap());
    assert_eq!(bytes_a.len(), 45);
    assert_eq!(bytes_a[44], Scheme::XorPad.tag());

    let c = dir.path().join("c.bin");
    bin()
        .args(["keygen", "--seed", "8", "--scheme", "xorpad", "--out"])
        .arg(&c)
        .status()
        .unwrap();
    assert_ne!(bytes_a, fs::read(&c).unwrap());
}

#[test]
fn threshold_command_prints_published_value() {
    let out = bin()
        .args(["threshold", "--k", "16384", "--fpr", "1e-6"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("0.5186"), "missing threshold in: {text}");
    assert!(text.contains("8496"));
}

#[test]
fn capacity_command_prints_payload_and_users() {
    let out = bin()
        .args(["capacity", "--acc", "0.6616", "--f-hw", "1", "--shape", "4x64x64"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("7.67"), "payload missing in: {text}");
    assert!(text.contains("1256.99") || text.contains("1257"), "users missing in: {text}");

    let zero = bin()
        .args(["capacity", "--acc", "0.5"])
        .output()
        .unwrap();
    let text = String::from_utf8(zero.stdout).unwrap();
    assert!(text.contains("payload_rate: 0.0000%"), "{text}");
}

#[test]
fn usage_and_runtime_error_exit_codes() {
    // Unknown flag: clap usage error, exit code 2.
    let out = bin().args(["threshold", "--nope", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Missing config file: runtime error, exit code 1, single-line stderr.
    let out = bin()
        .args(["synth-data", "--config", "/nonexistent.json", "--out", "/tmp/x.bin"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "), "stderr was: {err}");

    // Domain error: fpr outside (0, 1).
    let out = bin()
        .args(["threshold", "--k", "16", "--fpr", "2.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn embed_evaluate_round_trip_identity_channel() {
    let dir = tempfile::tempdir().unwrap();
    // Zero drift, no quantization: clean extraction is exact.
    let config = tiny_config(dir.path(), false, 0);
    commands::keygen(&config.key_path, Scheme::ChaCha20, 4).unwrap();

    let embed_dir = dir.path().join("embedded");
    let manifest = commands::embed(&config, None, &embed_dir, None).unwrap();
    assert_eq!(manifest.items.len(), 6);
    assert_eq!(manifest.k, config.shape().unwrap().payload_len());

    // Re-running embed reproduces the manifest bit for bit.
    let embed_dir2 = dir.path().join("embedded2");
    let manifest2 = commands::embed(&config, None, &embed_dir2, None).unwrap();
    assert_eq!(manifest.watermark_hex, manifest2.watermark_hex);
    assert_eq!(
        fs::read(embed_dir.join(&manifest.items[3].image)).unwrap(),
        fs::read(embed_dir2.join(&manifest2.items[3].image)).unwrap()
    );

    let out_dir = dir.path().join("reports");
    let rows = commands::evaluate(&config, &embed_dir, &out_dir).unwrap();

    // Clean + nine distortions + the Adv. aggregate.
    assert_eq!(rows.len(), 11);
    let clean = &rows[0];
    assert_eq!(clean.row.distortion, "Clean");
    assert_eq!(clean.row.acc, 1.0, "identity channel must be exact");
    // The clean row dominates every distorted row.
    for row in &rows[1..] {
        assert!(clean.row.acc >= row.row.acc, "{} beat Clean", row.row.distortion);
    }
    // Adv. equals the unweighted mean of the nine distortion rows.
    let adv = rows.last().unwrap();
    assert_eq!(adv.row.distortion, "Adv.");
    let mean: f64 = rows[1..10].iter().map(|r| r.row.acc).sum::<f64>() / 9.0;
    assert!((adv.row.acc - mean).abs() < 1e-12);

    // Emitted files.
    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,f_hw,distortion,acc,tpr,tau,payload_rate,log2_users"));
    assert_eq!(csv.lines().count(), 1 + 11);
    // Two fpr targets: one extra tpr column.
    assert!(csv.lines().next().unwrap().ends_with("tpr@1e-4"));
    assert!(out_dir.join("report.json").exists());
    let steps = fs::read_to_string(out_dir.join("steps.csv")).unwrap();
    assert!(steps.lines().next().unwrap().starts_with("distortion,step,mean_acc"));
    // 10 rows x (8 steps + step-0) + header.
    assert_eq!(steps.lines().count(), 1 + 10 * 9);
}

#[test]
fn evaluate_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), true, 3);
    commands::keygen(&config.key_path, Scheme::XorPad, 11).unwrap();
    let embed_dir = dir.path().join("embedded");
    commands::embed(&config, None, &embed_dir, None).unwrap();

    let parallel = commands::evaluate(&config, &embed_dir, &dir.path().join("out_par")).unwrap();
    let single_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let serial = single_pool
        .install(|| commands::evaluate(&config, &embed_dir, &dir.path().join("out_ser")))
        .unwrap();

    assert_eq!(parallel.len(), serial.len());
    for (p, s) in parallel.iter().zip(&serial) {
        // Every emitted number except wall-clock must be identical.
        assert_eq!(p.row, s.row);
        assert_eq!(p.log_auc, s.log_auc);
        for (pp, sp) in p.fpr_points.iter().zip(&s.fpr_points) {
            assert_eq!(pp.tpr, sp.tpr);
            assert_eq!(pp.tau, sp.tau);
        }
    }
}

#[test]
fn osi_and_frozen_extractors_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), true, 3);
    commands::keygen(&config.key_path, Scheme::ChaCha20, 21).unwrap();
    let embed_dir = dir.path().join("embedded");
    commands::embed(&config, None, &embed_dir, None).unwrap();

    // Untrained model: probabilities 0.5 everywhere decode to the all-zero
    // payload, so accuracy sits near 1/2.
    let ckpt = dir.path().join("init.ckpt");
    OsiModel::init(2, 9).save(&ckpt).unwrap();
    config.extractor = ExtractorSpec::Osi { checkpoint: ckpt };
    config.distortion_suite = vec![DistortionSpec::identity()];
    let rows = commands::evaluate(&config, &embed_dir, &dir.path().join("osi_out")).unwrap();
    assert_eq!(rows[0].row.method, "osi");
    assert!((rows[0].row.acc - 0.5).abs() < 0.3);

    config.extractor = ExtractorSpec::Frozen;
    let rows = commands::evaluate(&config, &embed_dir, &dir.path().join("frozen_out")).unwrap();
    assert_eq!(rows[0].row.method, "frozen");
    // The encoder-only baseline is far better than chance on this channel.
    assert!(rows[0].row.acc > 0.6, "frozen acc {}", rows[0].row.acc);
}

#[test]
fn synth_and_train_commands() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), true, 3);
    let data_path = dir.path().join("train.set");
    let n = commands::synth_data(&config, &data_path, Some(1234)).unwrap();
    assert_eq!(n, 6);
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("train.set.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["seed"], 1234);
    assert_eq!(sidecar["count"], 6);

    let ckpt = dir.path().join("model.ckpt");
    let history_path = commands::train(&config, &data_path, &ckpt, None).unwrap();
    assert!(ckpt.exists());
    let history = fs::read_to_string(&history_path).unwrap();
    assert_eq!(history.lines().count(), 1 + 1); // header + 1 epoch
    assert!(history.starts_with("epoch,bce,mse,total"));

    // The checkpoint loads and predicts.
    let model = OsiModel::load(&ckpt).unwrap();
    assert_eq!(model.channels(), 2);
}

#[test]
fn evaluate_rejects_mismatched_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), true, 3);
    commands::keygen(&config.key_path, Scheme::ChaCha20, 2).unwrap();
    let embed_dir = dir.path().join("embedded");
    commands::embed(&config, None, &embed_dir, None).unwrap();

    let mut wrong = config.clone();
    wrong.f_hw = 4;
    let err = commands::evaluate(&wrong, &embed_dir, &dir.path().join("bad")).unwrap_err();
    assert!(err.to_string().contains("f_hw"), "unexpected error: {err}");
}

#[test]
fn explicit_watermark_hex_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), false, 0);
    commands::keygen(&config.key_path, Scheme::ChaCha20, 31).unwrap();
    // k = 2 * 2 * 2 = 8 bits -> exactly one hex byte.
    let manifest = commands::embed(&config, Some("a5"), &dir.path().join("e"), None).unwrap();
    assert_eq!(manifest.watermark_hex, "a5");
    let rows = commands::evaluate(
        &ExperimentConfig {
            distortion_suite: vec![DistortionSpec::new(DistortionKind::Identity, 0.0, 0).unwrap()],
            ..config
        },
        &dir.path().join("e"),
        &dir.path().join("r"),
    )
    .unwrap();
    assert_eq!(rows[0].row.acc, 1.0);
}

#[test]
fn config_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), true, 3);
    let path: PathBuf = dir.path().join("exp.json");
    config.save(&path).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.pipeline, config.pipeline);
    assert_eq!(loaded.base_seed, config.base_seed);
    assert_eq!(loaded.fpr_targets, config.fpr_targets);
}
