//! `psam` — batch CLI for the section-image malware pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use promptsam::cli::{self, RunConfig};

#[derive(Parser)]
#[command(name = "psam", about = "Section-aware malware imaging and detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training/shuffle seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run numerics in 64-bit floats (weights container included).
    #[arg(long = "f64")]
    use_f64: bool,
}

impl ConfigArgs {
    fn load(&self) -> cli::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.use_f64 |= self.use_f64;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of APK/DEX/binary files to PNGs plus a manifest.
    Convert {
        /// Input directory (optionally with one level of label subdirs).
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image width in pixels.
        #[arg(long, default_value_t = 256, value_parser = parse_width)]
        width: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on the manifest's train split and write a weights container.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score the manifest's test split with trained weights.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-year evaluation plus AUT summary on a manifest with years.
    Drift {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// AUT per row of a CSV of metric series (name, v1, v2, ...).
    Aut {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_width(value: &str) -> Result<usize, String> {
    match value {
        "256" => Ok(256),
        "512" => Ok(512),
        "1024" => Ok(1024),
        other => Err(format!("width must be 256, 512, or 1024, got {other}")),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psam: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> cli::Result<()> {
    match Cli::parse().command {
        Command::Convert {
            input,
            out,
            width,
            config,
        } => {
            let mut cfg = config.load()?;
            cfg.convert.width = width;
            let summary = cli::cmd_convert(&input, &out, &cfg.convert)?;
            println!(
                "converted {} file(s), {} failure(s); manifest at {}",
                summary.converted,
                summary.failed.len(),
                summary.manifest_path.display()
            );
        }
        Command::Train {
            manifest,
            weights,
            out,
            config,
        } => {
            let cfg = config.load()?;
            std::fs::create_dir_all(&out)?;
            let log = out.join("training_log.csv");
            let report = cli::cmd_train(&manifest, &cfg, &weights, &log)?;
            let last = report.epoch_acc.last().copied().unwrap_or(0.0);
            println!(
                "trained {} epoch(s), final train accuracy {last:.4}; weights at {}",
                report.epoch_acc.len(),
                weights.display()
            );
        }
        Command::Eval {
            manifest,
            weights,
            out,
            config,
        } => {
            let cfg = config.load()?;
            match cli::cmd_eval(&manifest, &cfg, &weights, &out)? {
                cli::EvalOutput::Detect(metrics) => {
                    println!(
                        "accuracy {:?}, f1 {:?}; reports in {}",
                        metrics.acc,
                        metrics.f1,
                        out.display()
                    );
                }
                cli::EvalOutput::Family {
                    global_accuracy, ..
                } => {
                    println!(
                        "global accuracy {global_accuracy:.4}; reports in {}",
                        out.display()
                    );
                }
            }
        }
        Command::Drift {
            manifest,
            weights,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let report = cli::cmd_drift(&manifest, &cfg, &weights, &out)?;
            for (metric, value) in &report.aut {
                println!("AUT[{metric}] = {value:.4}");
            }
            println!("reports in {}", out.display());
        }
        Command::Aut { input, out } => {
            for (name, value) in cli::cmd_aut(&input, &out)? {
                println!("{name}: {value:.4}");
            }
        }
    }
    Ok(())
}
