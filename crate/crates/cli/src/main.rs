mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    /// The command ran but its check failed (exit 1).
    Validation(String),
    /// Bad input, files or arguments (exit 2).
    Input(String),
}

impl From<evit_core::ModelError> for Failure {
    fn from(e: evit_core::ModelError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<evit_tensor::io::IoError> for Failure {
    fn from(e: evit_tensor::io::IoError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("evit: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("evit: error: {msg}");
            ExitCode::from(2)
        }
    }
}
