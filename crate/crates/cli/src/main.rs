use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use latentmark::cipher::Scheme;
use latentmark_cli::commands;
use latentmark_cli::config::ExperimentConfig;

/// Desk-scale laboratory for sign-mask latent-noise image watermarks.
#[derive(Parser)]
#[command(name = "latentmark", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic key file (32-byte key, 12-byte nonce, scheme tag).
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// chacha20 or xorpad.
        #[arg(long, default_value = "chacha20")]
        scheme: String,
        #[arg(long)]
        seed: u64,
    },
    /// Synthesize a watermark-free triplet dataset for training.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's base_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed a watermark into a batch of generations; writes images, latents
    /// and the ground-truth manifest.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Payload as hex (big-endian bit packing); random when omitted.
        #[arg(long)]
        watermark: Option<String>,
        /// Overrides the config's base_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the configured extractor over the distortion suite and emit
    /// report.csv / report.json (and steps.csv for the multi-step path).
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `embed`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's base_seed (reseeds the default suite).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the one-step extractor on a stored dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file written by `synth-data`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the loss history CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the train section's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Channel capacity, payload rate and user count for a bit accuracy.
    Capacity {
        #[arg(long)]
        acc: f64,
        /// Repetition factor; defaults to the config's f_hw, else 1.
        #[arg(long)]
        f_hw: Option<usize>,
        /// Latent shape as CxHxW; defaults to the config's shape, else 4x64x64.
        #[arg(long)]
        shape: Option<String>,
        /// Optional experiment config supplying shape and f_hw.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional JSON output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection threshold for a payload length at a target FPR.
    Threshold {
        /// Payload length; defaults to the config's k when omitted.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        fpr: f64,
        /// Optional experiment config supplying the payload length.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional JSON output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_shape(text: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow::anyhow!("shape must look like 4x64x64, got '{text}'"))?;
    if parts.len() != 3 {
        anyhow::bail!("shape must have three dimensions CxHxW, got '{text}'");
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Keygen { out, scheme, seed } => {
            let scheme: Scheme = scheme.parse()?;
            commands::keygen(&out, scheme, seed)?;
            println!("wrote {scheme} key to {}", out.display());
        }
        Cmd::SynthData { config, out, seed } => {
            let config = ExperimentConfig::load(&config)?;
            let n = commands::synth_data(&config, &out, seed)?;
            println!("wrote {n} triplets to {}", out.display());
        }
        Cmd::Embed {
            config,
            out,
            watermark,
            seed,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let manifest = commands::embed(&config, watermark.as_deref(), &out, seed)?;
            println!(
                "embedded {}-bit watermark {} into {} images under {}",
                manifest.k,
                manifest.watermark_hex,
                manifest.items.len(),
                out.display()
            );
        }
        Cmd::Evaluate {
            config,
            data,
            out,
            seed,
        } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                config.base_seed = seed;
            }
            let rows = commands::evaluate(&config, &data, &out)?;
            println!("{}", latentmark::ReportRow::CSV_HEADER);
            for row in &rows {
                println!("{}", row.row.to_csv());
            }
            println!("reports written to {}", out.display());
        }
        Cmd::Train {
            config,
            data,
            out,
            seed,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let history = commands::train(&config, &data, &out, seed)?;
            println!(
                "checkpoint written to {}, history to {}",
                out.display(),
                history.display()
            );
        }
        Cmd::Capacity {
            acc,
            f_hw,
            shape,
            config,
            out,
        } => {
            let loaded = config.map(|p| ExperimentConfig::load(&p)).transpose()?;
            let f_hw = f_hw
                .or_else(|| loaded.as_ref().map(|c| c.f_hw))
                .unwrap_or(1);
            let (c, h, w) = match (shape, &loaded) {
                (Some(text), _) => parse_shape(&text)?,
                (None, Some(cfg)) => {
                    let s = cfg.pipeline.shape;
                    (s.c, s.h, s.w)
                }
                (None, None) => (4, 64, 64),
            };
            let rates = commands::capacity(acc, f_hw, c, h, w)?;
            println!("crossover_p:  {:.6}", rates.crossover_p);
            println!("capacity:     {:.6} bits/position", rates.capacity);
            println!("payload_rate: {:.4}%", 100.0 * rates.payload_rate);
            println!("log2_users:   {:.2} bits", rates.log2_users);
            let json = serde_json::to_string(&rates)?;
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, &json)?;
            }
        }
        Cmd::Threshold { k, fpr, config, out } => {
            let k = match (k, config) {
                (Some(k), _) => k,
                (None, Some(path)) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    cfg.shape()?.payload_len()
                }
                (None, None) => anyhow::bail!("either --k or --config is required"),
            };
            let (tau, t) = commands::threshold(k, fpr)?;
            println!("k:   {k}");
            println!("fpr: {fpr:e}");
            println!("t:   {t} (detect when matched bits > t)");
            println!("tau: {tau:.4}");
            let json = serde_json::json!({ "k": k, "fpr": fpr, "t": t, "tau": tau });
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, json.to_string())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap handles usage errors itself with exit code 2.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
