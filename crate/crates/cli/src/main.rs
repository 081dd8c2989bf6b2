#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Failure classes with stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error:\n{0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<spdegp::Error> for CliError {
    fn from(e: spdegp::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "spdegp", version, about = "SPDE-based space-time Gaussian processes: simulation, interpolation, ensembles and fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
#[command(after_help = config::key_help())]
struct RunArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides: `--key value` or `--key=value` for any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a prior trajectory.
    Simulate(RunArgs),
    /// Optimal interpolation of observations.
    Interpolate(RunArgs),
    /// Conditional-simulation ensemble with spread and CRPS maps.
    Ensemble(RunArgs),
    /// Fit parameters against a truth trajectory.
    Fit(RunArgs),
    /// Score an estimate against the truth.
    Score(RunArgs),
    /// Cross-check sparse computations against dense references.
    OracleCheck(RunArgs),
}

type Handler = fn(&RunConfig) -> Result<serde_json::Value, CliError>;

fn run(command: Command) -> Result<serde_json::Value, CliError> {
    let (args, handler): (RunArgs, Handler) = match command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::Interpolate(a) => (a, commands::interpolate),
        Command::Ensemble(a) => (a, commands::ensemble),
        Command::Fit(a) => (a, commands::fit),
        Command::Score(a) => (a, commands::score),
        Command::OracleCheck(a) => (a, commands::oracle_check),
    };
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    handler(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
