//! `lagsid`: batch experiments for sparse Lagrangian identification.
//!
//! Exit status is 0 when every cell succeeds, 2 when some cells fail and 1
//! when the configuration is invalid or the run cannot start.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "lagsid",
    version,
    about = "Sparse Lagrangian identification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate systems and write noisy datasets to `<out>/data`.
    Generate(Common),
    /// Fit every cell and write reports to `<out>/reports`.
    Identify(Common),
    /// Score reports and write `ledger.csv` and `summary.txt`.
    Evaluate(Common),
    /// Compare full data, missing data and no curvature penalty.
    Ablate(Common),
    /// Basins of attraction of the true and identified magnetic pendulum.
    Basin(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated system ids, or `all`.
    #[arg(long = "system", value_name = "ID")]
    systems: Option<String>,
    /// Comma-separated noise levels, e.g. `0,0.01,0.1`.
    #[arg(long, value_name = "LEVELS")]
    noise: Option<String>,
    /// Seeds as a list and/or half-open ranges, e.g. `0..5` or `1,4`.
    #[arg(long, value_name = "LIST")]
    seeds: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (0: all cores).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Disable the curvature penalty (beta = 0).
    #[arg(long)]
    no_reg: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            systems: self
                .systems
                .as_deref()
                .map(config::parse_systems)
                .transpose()?,
            noise: self.noise.as_deref().map(config::parse_noise).transpose()?,
            seeds: self.seeds.as_deref().map(config::parse_seeds).transpose()?,
            out: self.out.clone(),
            workers: self.workers,
            no_reg: self.no_reg,
        };
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&ExperimentConfig) -> Result<usize>) = match &cli.command {
        Command::Generate(c) => (c, commands::generate),
        Command::Identify(c) => (c, commands::identify),
        Command::Evaluate(c) => (c, commands::evaluate_cmd),
        Command::Ablate(c) => (c, commands::ablate),
        Command::Basin(c) => (c, commands::basin),
    };
    let cfg = match common.load() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(&cfg) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} cell(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
