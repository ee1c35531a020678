mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(catefuse_core::Error),
}

impl From<catefuse_core::Error> for CliError {
    fn from(e: catefuse_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            3 => "numerical",
            _ => "data",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn report_error(err: &CliError, json: bool) -> ExitCode {
    if json {
        let body = serde_json::json!({
            "error": {
                "kind": err.kind(),
                "message": err.message(),
                "exit_code": err.exit_code(),
            }
        });
        eprintln!("{body}");
    } else {
        eprintln!("error: {}", err.message());
    }
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let json_requested = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if json_requested {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
                return report_error(&CliError::Usage(first.to_string()), true);
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a, cli.verbose),
        Command::Fit(a) => commands::fit(a, cli.verbose),
        Command::Experiment(a) => commands::experiment(a, cli.verbose),
        Command::Report(a) => commands::report(a, cli.verbose),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e, cli.json_errors),
    }
}
