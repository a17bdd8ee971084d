mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Invalid invocation or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "kacl", version, about = "Contrastive chest-phantom classification and localization")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Override the seed of the dataset spec (generate) or of training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    /// Print per-epoch progress and debug diagnostics.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Print machine-readable JSON on stdout instead of text tables.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for generation, radiomics and evaluation.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic phantom dataset (PGM images + manifest.json).
    Generate {
        /// Dataset spec (TOML, or JSON by extension); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes checkpoints, train_log.csv and report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's Grad-CAM box threshold.
        #[arg(long)]
        cam_threshold: Option<f64>,
    },
    /// Train and evaluate the four ablation variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's Grad-CAM box threshold.
        #[arg(long)]
        cam_threshold: Option<f64>,
        /// Number of seeds, counting up from the configured seed.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
    },
    /// Evaluate a checkpoint: per-class AUC and localization accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        dataset: PathBuf,
        /// IoU thresholds as start:end:step or a comma list.
        #[arg(long, value_parser = parse_thresholds)]
        loc_thresholds: Option<Thresholds>,
        /// Report path; defaults to eval_report.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the radiomic feature vector of every boxed image.
    ExtractRadiomics {
        #[arg(long)]
        manifest: PathBuf,
        /// CSV of raw features; a `.json` path also gets normalized values.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = kacl_core::radiomics::DEFAULT_GRAY_LEVELS)]
        gray_levels: usize,
    },
    /// Inspect intermediate products of a trained model.
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
}

#[derive(Subcommand, Debug)]
pub enum Inspect {
    /// Grad-CAM heatmap and box for one image, as a PGM overlay plus JSON.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Image id from the manifest.
        #[arg(long)]
        image: usize,
        /// Class index or name.
        #[arg(long)]
        class: String,
        /// Heatmap threshold; defaults to the checkpoint's.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Debug)]
pub struct Thresholds(pub Vec<f64>);

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    config::parse_thresholds(s).map(Thresholds)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<kacl_core::Error>() {
        return e.exit_code() as u8;
    }
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (_, true) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).parse_env("KACL_LOG").init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
