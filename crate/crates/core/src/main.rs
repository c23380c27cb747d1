//! `forge`: batch pseudo-fake synthesis, verification, and loss scoring.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 invariant breach.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use forge::config::{ConfigOverrides, PipelineConfig};
use forge::error::ForgeError;
use forge::forgery_math::LossWeights;
use forge::pipeline;
use forge::spectral_diagnostics::dataset_report;
use forge::synthesis::Manifest;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Parser)]
#[command(name = "forge", version, about = "Pseudo-fake synthesis and forgery-math toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonConfig {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config and FORGE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count; overrides the config and FORGE_WORKERS.
    #[arg(long)]
    workers: Option<usize>,
    /// Output root; overrides the config and FORGE_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one pseudo-fake per landmark record.
    Synth {
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Replay a sampled subset of a manifest and check artifact integrity.
    Verify {
        /// Manifest produced by `synth`.
        #[arg(long)]
        manifest: PathBuf,
        /// Root holding samples/ and masks/ (defaults to the manifest's
        /// directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the recorded input image root.
        #[arg(long)]
        input_root: Option<PathBuf>,
        /// Override the recorded landmark file.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Fraction of samples to replay (floor of 10).
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Aggregate dataset statistics from a manifest.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root holding samples/ and masks/ (defaults to the manifest's
        /// directory).
        #[arg(long)]
        output_root: Option<PathBuf>,
        /// Override the recorded input image root.
        #[arg(long)]
        input_root: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score feature tensors against masks and emit a channel selection
    /// plan.
    Score {
        /// Directory of `<id>.real.fmap` / `<id>.fake.fmap` tensors.
        #[arg(long)]
        features: PathBuf,
        /// Directory of `<id>.png` masks.
        #[arg(long)]
        masks: PathBuf,
        /// Pipeline config supplying the loss weights and band width.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Temperature; overrides the config.
        #[arg(long)]
        tau: Option<f64>,
        /// Boundary-band width; overrides the config.
        #[arg(long)]
        band_width: Option<u32>,
        /// Channels to keep per layer (defaults to all).
        #[arg(long)]
        top_m: Option<usize>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate one recorded sample.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &ForgeError) -> u8 {
    match err {
        ForgeError::Config(_) => EXIT_CONFIG,
        ForgeError::ReplayDivergence { .. } | ForgeError::EmptyRegion(_) => EXIT_INVARIANT,
        _ => EXIT_DATA,
    }
}

fn load_config(common: &CommonConfig) -> Result<PipelineConfig, ForgeError> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => match std::env::var("FORGE_CONFIG") {
            Ok(path) => PipelineConfig::load(std::path::Path::new(&path))?,
            Err(_) => PipelineConfig::default(),
        },
    };
    config.apply_env()?;
    config.apply_overrides(&ConfigOverrides {
        seed: common.seed,
        workers: common.workers,
        output_root: common.out.clone(),
        ..ConfigOverrides::default()
    });
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, ForgeError> {
    match cli.command {
        Command::Synth { common } => {
            let config = load_config(&common)?;
            let summary = pipeline::run_synthesis(&config)?;
            println!(
                "synth: {} ok, {} skipped, {} failed of {} -> {}",
                summary.succeeded,
                summary.skipped.len(),
                summary.failed.len(),
                summary.total,
                summary.manifest_path.display()
            );
            for (image, reason) in &summary.skipped {
                println!("  skipped {image}: {reason}");
            }
            for (id, reason) in &summary.failed {
                println!("  failed {id}: {reason}");
            }
            if summary.failure_rate() > config.failure_threshold {
                eprintln!(
                    "failure rate {:.4} exceeds threshold {:.4}",
                    summary.failure_rate(),
                    config.failure_threshold
                );
                return Ok(ExitCode::from(EXIT_DATA));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            manifest,
            out,
            input_root,
            landmarks,
            fraction,
        } => {
            let output_root = out.unwrap_or_else(|| {
                manifest
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let outcome = pipeline::verify(
                &manifest,
                &output_root,
                input_root.as_deref(),
                landmarks.as_deref(),
                fraction,
            )?;
            println!(
                "verify: replayed {} sample(s), {} problem(s)",
                outcome.replayed,
                outcome.problems.len()
            );
            for problem in &outcome.problems {
                println!("  {problem:?}");
            }
            if outcome.ok() {
                Ok(ExitCode::SUCCESS)
            } else if outcome.has_integrity_breach() {
                Ok(ExitCode::from(EXIT_INVARIANT))
            } else {
                Ok(ExitCode::from(EXIT_DATA))
            }
        }
        Command::Report {
            manifest,
            out,
            output_root,
            input_root,
            json,
        } => {
            let manifest_doc = Manifest::read(&manifest)?;
            let root = output_root.or(out).unwrap_or_else(|| {
                manifest
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let input = input_root
                .unwrap_or_else(|| PathBuf::from(&manifest_doc.header.input_root));
            let report = dataset_report(&manifest_doc, &root, &input);
            print!("{}", report.render_table());
            let json_text = report.to_json();
            match json {
                Some(path) => {
                    std::fs::write(&path, json_text).map_err(|e| ForgeError::io(&path, e))?
                }
                None => println!("{json_text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Score {
            features,
            masks,
            config,
            tau,
            band_width,
            top_m,
            out,
        } => {
            let base = match config {
                Some(path) => PipelineConfig::load(&path)?,
                None => PipelineConfig::default(),
            };
            let weights = LossWeights {
                tau: tau.unwrap_or(base.loss.tau),
                ..base.loss
            };
            let band_width = band_width.unwrap_or(base.band_width);
            let report = pipeline::score(&features, &masks, &weights, band_width, top_m)?;
            let json = report.to_json();
            match out {
                Some(path) => std::fs::write(&path, json).map_err(|e| ForgeError::io(&path, e))?,
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            manifest,
            sample,
            out,
        } => {
            let output_root = manifest
                .parent()
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            pipeline::replay_sample(&manifest, &sample, &output_root, &out)?;
            println!("replay: regenerated {sample} into {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
