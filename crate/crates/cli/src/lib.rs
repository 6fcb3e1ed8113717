//! Command-line front end: TOML configs, fixtures, the `dice` subcommands and
//! their output files.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Report;
use crate::config::{ExperimentConfig, Overrides};
use crate::error::CliResult;
use crate::experiment::Experiment;

#[derive(Debug, Parser)]
#[command(name = "dice", version, about = "Discrete diffusion inversion and editing with exact denoisers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML experiment config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Inversion record to replay instead of inverting fresh sources.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Invert one source sequence and write `record.dice`.
    Invert,
    /// Replay inversions with the source condition and score exact recovery.
    Reconstruct,
    /// Edit sources towards the target condition.
    Edit,
    /// Plain sampling under the target condition.
    Sample,
    /// Mutual information between the clean signal and a Gaussian residual.
    MiCurve,
    /// Edit metrics over a grid of `lambda_1` with `lambda_2 = 1 - lambda_1`.
    Sweep,
}

impl Cli {
    pub fn experiment_config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides);
        Ok(cfg)
    }
}

/// Runs one command and returns its report without touching the disk.
pub fn execute(cli: &Cli) -> CliResult<Report> {
    let cfg = cli.experiment_config()?;
    let record = cli.record.as_deref();
    if cli.command == Command::MiCurve {
        return commands::mi_curve_report(&cfg);
    }
    let exp = Experiment::new(cfg)?;
    match cli.command {
        Command::Invert => commands::invert(&exp),
        Command::Reconstruct => commands::reconstruct(&exp, record),
        Command::Edit => commands::edit(&exp, record),
        Command::Sample => commands::sample(&exp, record),
        Command::Sweep => commands::sweep(&exp, record),
        Command::MiCurve => unreachable!(),
    }
}

/// Runs one command and writes its outputs; returns the stdout summary.
pub fn run(cli: &Cli) -> CliResult<String> {
    let report = execute(cli)?;
    let dir = cli.experiment_config()?.resolve_out_dir();
    let written = report.write(&dir)?;
    let mut msg = report.message.clone();
    for path in written {
        msg.push_str(&format!("\nwrote {}", path.display()));
    }
    Ok(msg)
}
