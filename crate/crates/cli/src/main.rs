use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use petseg_cli::{commands, Overrides, RunConfig};

/// PET/CT lesion segmentation pipeline.
#[derive(Debug, Parser)]
#[command(name = "petseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    folds: Option<usize>,
}

#[derive(Clone, Copy, Debug, Subcommand)]
enum Command {
    /// Write a synthetic case set to the data directory.
    Synth,
    /// Resample and window every case.
    Preprocess,
    /// Train one model per cross-validation fold.
    Train,
    /// Ensemble sliding-window prediction for every case.
    Predict,
    /// Score predictions against ground truth.
    Evaluate,
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        epochs: cli.epochs,
        folds: cli.folds,
    };
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, overrides)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply(overrides);
            cfg.validate()?;
            cfg
        }
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth => {
            let ids = commands::synth(&cfg)?;
            println!("wrote {} cases to {}", ids.len(), cfg.data_dir.display());
        }
        Command::Preprocess => {
            let ids = commands::preprocess(&cfg)?;
            println!(
                "preprocessed {} cases into {}",
                ids.len(),
                cfg.preprocessed_dir().display()
            );
        }
        Command::Train => {
            for path in commands::train(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Predict => {
            for path in commands::predict(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate => {
            let (_, s) = commands::evaluate(&cfg)?;
            println!(
                "{} cases: dice {:.4} ± {:.4}, fp {:.3} ± {:.3} mL, fn {:.3} ± {:.3} mL",
                s.cases,
                s.dice.mean,
                s.dice.std,
                s.fp_volume_ml.mean,
                s.fp_volume_ml.std,
                s.fn_volume_ml.mean,
                s.fn_volume_ml.std
            );
            println!("{}", cfg.metrics_csv().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    petseg_core::alloc::retain_freed_memory();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("petseg: {e:#}");
            ExitCode::FAILURE
        }
    }
}
