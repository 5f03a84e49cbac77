use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use hrvopt::{
    cmd_evaluate, cmd_evaluate_matrix, cmd_optimize, cmd_preprocess, cmd_report, cmd_synth, Optimizer, Overrides,
    Preset, RunConfig,
};
use hrvopt_core::windowing::{FeatureSet, WindowParams};

#[derive(Parser)]
#[command(name = "hrvopt", version, about = "Driver stress detection with optimized HRV windowing")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file or a manifest.json from a previous run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    feature_set: Option<FeatureSet>,
    #[arg(long, global = true, value_enum)]
    optimizer: Option<Optimizer>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Detect beats and write RR series for every ECG record.
    Preprocess,
    /// Search the windowing hyperparameters.
    Optimize,
    /// Cross-validate a single windowing configuration.
    Evaluate {
        #[arg(long, required_unless_present = "matrix")]
        window: Option<u32>,
        #[arg(long, required_unless_present = "matrix")]
        overlap: Option<u32>,
        /// Evaluate a feature-matrix CSV instead of the RR data.
        #[arg(long, conflicts_with_all = ["window", "overlap"])]
        matrix: Option<PathBuf>,
    },
    /// Write a synthetic labeled ECG corpus.
    Synth,
    /// Re-bin a search trace into regions.csv.
    Report {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("HRVOPT_THREADS") {
        let n: usize = value.parse().context("HRVOPT_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let c = cli.common;
    let base = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = base.resolve(&Overrides {
        seed: c.seed,
        feature_set: c.feature_set,
        optimizer: c.optimizer,
        preset: c.preset,
        out_dir: c.out,
    })?;

    match cli.command {
        Command::Preprocess => {
            let log = cmd_preprocess(&config)?;
            let ok = log.iter().filter(|e| e.ok).count();
            println!("pre-processed {ok}/{} records", log.len());
        }
        Command::Optimize => {
            let out = cmd_optimize(&config)?;
            println!(
                "best window {} s, overlap {}%, accuracy {:.4}",
                out.best.window_size_s, out.best.overlap_pct, out.best.accuracy
            );
        }
        Command::Evaluate { window, overlap, matrix } => {
            let accuracy = match (matrix, window, overlap) {
                (Some(path), _, _) => cmd_evaluate_matrix(&config, &path)?.accuracy,
                (None, Some(w), Some(o)) => cmd_evaluate(&config, WindowParams::new(w, o))?.result.accuracy,
                _ => unreachable!("clap enforces window and overlap"),
            };
            println!("accuracy {accuracy:.4}");
        }
        Command::Synth => {
            let n = cmd_synth(&config)?;
            println!("wrote {n} synthetic records to {}", config.ecg_dir().display());
        }
        Command::Report { trace } => {
            let report = cmd_report(&config, &trace)?;
            println!("{} region cells, {} evaluations outside the bins", report.cells.len(), report.unbinned);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
