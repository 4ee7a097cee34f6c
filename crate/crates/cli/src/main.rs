mod args;
mod commands;
mod config;
mod provenance;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, SweepKind};
use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs: exit status 1.
    Validation(String),
    /// Failure while running: exit status 2.
    Runtime(String),
}

impl From<gpfuse::Error> for CliError {
    fn from(e: gpfuse::Error) -> Self {
        use gpfuse::Error::*;
        match e {
            InvalidParameter(_) | DimensionMismatch(_) | Missing(_) | TooFewPoints { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let flags = &cli.flags;
    match cli.command {
        Command::Generate => {
            commands::generate_cmd(RunConfig::resolve("generate", flags, false, false)?)
        }
        Command::TrainExperts => {
            commands::train_experts_cmd(RunConfig::resolve("train-experts", flags, false, false)?)
        }
        Command::Fit => commands::fit_cmd(RunConfig::resolve("fit", flags, false, false)?),
        Command::Evaluate => {
            commands::evaluate_cmd(RunConfig::resolve("evaluate", flags, false, false)?)
        }
        Command::Sweep { kind } => {
            let (name, list_k, list_m) = match kind {
                SweepKind::Experts => ("sweep-experts", true, false),
                SweepKind::Frequencies => ("sweep-frequencies", false, true),
            };
            commands::sweep_cmd(RunConfig::resolve(name, flags, list_k, list_m)?, kind)
        }
        Command::Verify => commands::verify_cmd(RunConfig::resolve("verify", flags, false, false)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
