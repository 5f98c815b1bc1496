//! `heatwarn` command-line tool.
//!
//! Every subcommand reads one JSON run configuration, applies flag
//! overrides and writes its outputs plus a `manifest.json` under the output
//! directory.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] heatwarn::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Level {
    L1,
    L2,
}

#[derive(Debug, Parser)]
#[command(name = "heatwarn", version, about = "Heatwave mortality early warning")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Restrict level-specific outputs to one task.
    #[arg(long, global = true, value_enum)]
    pub level: Option<Level>,
    /// Alarm threshold for `--level` (L1 when no level is given).
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Process only this region.
    #[arg(long, global = true)]
    pub region: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured synthetic world as CSV files.
    Synth,
    /// Validate, merge and impute the input tables.
    Ingest,
    /// Write detected heatwave events.
    Detect,
    /// Write ground-truth levels of the scored events.
    Label,
    /// Train the forecaster and write a checkpoint.
    Train {
        /// Last day of training data (default: end of series).
        #[arg(long)]
        date: Option<String>,
    },
    /// Forecast the days after one origin date.
    Forecast {
        /// Forecast origin.
        #[arg(long)]
        date: String,
        /// Use these weights instead of training up to the origin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the rolling evaluation and write metrics and outcomes.
    Evaluate,
    /// Write false-alarm and missed-alarm rates over the threshold grid.
    Sweep,
    /// Aggregate per-region metrics into one table.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
