//! Config-driven experiment runner around `mftq_core`.

pub mod commands;
pub mod config;
pub mod model;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{CliError, Options, Outcome};

#[derive(Debug, Parser)]
#[command(name = "mftq", about = "Mean-field Q-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write one trace per seed plus a summary.
    Run(Common),
    /// Solve for the fixed point of the configured regime.
    Solve(Common),
    /// Train, solve, and report the gaps and accuracy bounds.
    Compare(Common),
    /// Constants, phi_max, schedule checks, and trace coverage.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// A trace CSV written by `run`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

impl From<&Common> for Options {
    fn from(c: &Common) -> Self {
        Options {
            config: c.config.clone(),
            out: c.out.clone(),
            seed: c.seed,
            quiet: c.quiet,
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(c) => commands::cmd_run(&c.into()),
        Command::Solve(c) => commands::cmd_solve(&c.into()),
        Command::Compare(c) => commands::cmd_compare(&c.into()),
        Command::Diagnose { common, trace } => commands::cmd_diagnose(&common.into(), trace.as_deref()),
    };
    match result {
        Ok(o) => o.exit_code(),
        Err(e) => {
            eprintln!("mftq: {e}");
            e.exit_code()
        }
    }
}
