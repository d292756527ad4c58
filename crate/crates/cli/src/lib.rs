//! Command-line front end for `fpflow`.
//!
//! Subcommands: `solve`, `train`, `eval`, `mc-compare` and `check`. Every
//! command reads a TOML configuration (defaults, then `--config`, then
//! `--set key=value`, then flags) and writes its outputs together with a
//! `meta.json` sidecar into the output directory.

pub mod check;
pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{FlagOverrides, Mode, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fpflow::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    /// 2 for bad input, 3 for numerical failure, 4 for failed checks, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use fpflow::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Config(_) | E::Shape { .. } | E::Checkpoint(_)) => 2,
            CliError::Core(E::NumericFailure { .. } | E::Divergence { .. } | E::TrainingAborted { .. }) => 3,
            CliError::ChecksFailed(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fpflow", version, about = "Probability-flow solver for Fokker-Planck equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Built-in problem: toy, tfp-gauss or sfp-ou.
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Seed for training and particle simulation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let flags = FlagOverrides {
            problem: self.problem.clone(),
            dim: self.dim,
            seed: self.seed,
            out: self.out.clone(),
            mode: self.mode,
        };
        RunConfig::load(self.config.as_deref(), &self.sets, &flags)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a zero-diffusion problem by characteristics, with no training.
    Solve(Common),
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the grid against the exact solution.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare an SDE particle histogram with the exact marginal.
    McCompare {
        #[command(flatten)]
        common: Common,
        /// Also evaluate this model at the bin centres.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the built-in invariant suite.
    Check {
        /// Write the results as JSON to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config(Common),
}

fn print_summary(summary: &report::ReportSummary) {
    println!("points: {}  flagged: {}", summary.points, summary.flagged);
    for (label, agg) in [("net", summary.net), ("ode", summary.ode)] {
        if let Some(a) = agg {
            println!(
                "{label}: MAPE {:.4}%  max rel {:.4e}  MSE(log) {:.4e}",
                a.mape, a.max_rel, a.mse_log
            );
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(common) => {
            let cfg = common.load()?;
            let (_, summary) = commands::solve(&cfg)?;
            print_summary(&summary);
            println!("wrote {}", cfg.output.dir.display());
        }
        Command::Train(common) => {
            let cfg = common.load()?;
            let (_, trace) = commands::train(&cfg)?;
            println!(
                "iterations: {}  skipped: {}  initial loss: {:.4e}  final loss: {:.4e}",
                trace.losses.len(),
                trace.skipped.len(),
                trace.initial_loss().unwrap_or(f64::NAN),
                trace.final_loss().unwrap_or(f64::NAN)
            );
            println!("wrote {}", cfg.output.dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let model = commands::load_checkpoint(&checkpoint)?;
            let (_, summary) = commands::evaluate(&cfg, model.as_model())?;
            print_summary(&summary);
            println!("wrote {}", cfg.output.dir.display());
        }
        Command::McCompare { common, checkpoint } => {
            let cfg = common.load()?;
            let model = checkpoint.as_deref().map(commands::load_checkpoint).transpose()?;
            let r = commands::mc_compare(&cfg, model.as_ref().map(|m| m.as_model()))?;
            println!(
                "particles: {}  sup error: {:.4e}  L1 error: {:.4e}  3-sigma bound: {:.4e}  {}",
                r.particles,
                r.sup_error,
                r.l1_error,
                r.bound,
                if r.within_bound { "within bound" } else { "outside bound" }
            );
            if let (Some(s), Some(l)) = (r.pinf_sup_error, r.pinf_l1_error) {
                println!("model: sup error {s:.4e}  L1 error {l:.4e}");
            }
            println!("wrote {}", cfg.output.dir.display());
        }
        Command::Check { json } => {
            let results = check::run_checks();
            for r in &results {
                println!("{}", r.line());
            }
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&results).expect("results serialize");
                std::fs::write(&path, text).map_err(|e| CliError::Io { path, source: e })?;
            }
            let failed = results.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed));
            }
        }
        Command::Config(common) => print!("{}", common.load()?.to_toml()),
    }
    Ok(())
}

pub fn main_exit() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
