//! Experiment runner: seeded simulation, estimation, bounds and diagnostics driven by a JSON config.

pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use run::RunOptions;

#[derive(Debug, Parser)]
#[command(name = "ope-lab", version, about = "Off-policy evaluation experiments with linear features")]
pub struct Cli {
    /// Experiment config (JSON, `"schema": 1`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Base seed; overrides the config's `seeds.base`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "OPE_LAB_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Estimate the target value from one seeded dataset and write evaluation.json.
    Evaluate,
    /// Repeat the estimate over a grid of sample sizes and seeds; writes sweep.csv and sweep_summary.csv.
    Sweep,
    /// Check confidence-bound coverage over seeds at one sample size; writes coverage.csv.
    Confidence,
    /// Population diagnostics of the instance; writes profile.json and mismatch.csv.
    Diagnose,
    /// Perturbed-instance likelihood experiment; writes hard_instance.csv.
    HardInstance,
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let config = ExperimentConfig::load(path)?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("ope-lab-out"));
    let opts = RunOptions {
        out,
        seed: cli.seed,
        threads: cli.threads,
    };
    match cli.command {
        Command::Evaluate => {
            let r = run::run_evaluate(&config, &opts)?;
            match r.bound {
                Some(b) => println!("v_hat {} +/- {} (v_true {})", r.v_hat, b, r.v_true),
                None => println!("v_hat {} (v_true {}; no bound)", r.v_hat, r.v_true),
            }
        }
        Command::Sweep => {
            let (_, summary) = run::run_sweep(&config, &opts)?;
            for s in summary {
                println!("n {} rmse {} coverage {:?}", s.n, s.rmse, s.coverage);
            }
        }
        Command::Confidence => {
            let s = run::run_confidence(&config, &opts)?;
            println!("n {} coverage {:?} mean bound {:?}", s.n, s.coverage, s.mean_bound);
        }
        Command::Diagnose => {
            let r = run::run_diagnose(&config, &opts)?;
            println!("weighted mismatch {} kappa1 {} kappa2 {}", r.mismatch_weighted, r.profile.kappa1, r.profile.kappa2);
        }
        Command::HardInstance => {
            let s = run::run_hard_instance(&config, &opts)?;
            println!(
                "P(ratio >= 1/2) = {} over {} datasets, value gap {}",
                s.frequency_ratio_ge_half, s.datasets, s.v_gap
            );
        }
    }
    Ok(())
}
