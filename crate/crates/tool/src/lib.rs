//! Command-line surface for the coarse spiking network experiments.
//!
//! `snn <subcommand> [--config file.toml] [flags]`. Every run writes into one
//! output directory: the resolved `config.toml`, `metrics.csv`,
//! `summary.json` and, for training commands, a checkpoint.

pub mod commands;
pub mod config;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

pub use config::{Dataset, ExperimentConfig};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configs or input files; nothing was computed.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl From<snn_core::Error> for CliError {
    fn from(e: snn_core::Error) -> Self {
        use snn_core::Error as E;
        match e {
            E::Config(_) | E::Data(_) | E::Checkpoint(_) | E::Label { .. } | E::Encode(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "snn", version, about = "Coarse-scale spiking network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file supplying defaults; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ExperimentConfig,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a preset network on MNIST or Fashion-MNIST.
    Train(RunArgs),
    /// Evaluate a checkpoint, optionally at a different spike-train length.
    Eval(RunArgs),
    /// Compare a checkpoint's coarse accuracy with exact LIF neurons.
    Transfer(RunArgs),
    /// Correlate fine and coarse firing rates on random recurrent networks.
    Validate(RunArgs),
    /// Train one network per surrogate slope.
    SweepBeta(RunArgs),
    /// Train one network per target spike count and transfer each.
    SweepNout(RunArgs),
    /// Train a cartpole policy with the cross-entropy method.
    Rl(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a)
            | Command::Eval(a)
            | Command::Transfer(a)
            | Command::Validate(a)
            | Command::SweepBeta(a)
            | Command::SweepNout(a)
            | Command::Rl(a) => a,
        }
    }
}

fn report(err: &CliError) {
    let msg = json!({ "error": { "kind": err.kind(), "message": format!("{err:#}") } });
    eprintln!("{msg}");
}

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    let args = cmd.args();
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?.merge(&args.flags),
        None => args.flags.clone(),
    };
    match cmd {
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Transfer(_) => commands::transfer(&cfg),
        Command::Validate(_) => commands::validate(&cfg),
        Command::SweepBeta(_) => commands::sweep_beta(&cfg),
        Command::SweepNout(_) => commands::sweep_nout(&cfg),
        Command::Rl(_) => commands::rl(&cfg),
    }
}

/// Runs the tool on `argv` (including the program name) and returns the
/// process exit code. Errors go to stderr as one JSON object.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let err = CliError::Usage(e.kind().to_string());
            let msg = json!({
                "error": { "kind": "usage", "message": err.to_string(), "detail": e.to_string() }
            });
            eprintln!("{msg}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(["snn", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run(["snn", "--help"]), EXIT_OK);
    }

    #[test]
    fn list_flags_split_on_commas() {
        let cli = Cli::try_parse_from(["snn", "sweep-nout", "--nouts", "2,4"]).unwrap();
        assert!(matches!(cli.command, Command::SweepNout(_)));
        assert_eq!(cli.command.args().flags.nouts, Some(vec![2, 4]));
    }
}
