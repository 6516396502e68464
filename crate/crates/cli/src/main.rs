use std::process::ExitCode;

use clap::Parser;
use sfrg_cli::{config, dispatch, Cli, Invocation};

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let argv = match config::expand(&raw) {
        Ok((argv, _)) => argv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());
    let result = Invocation::current(&argv[1..]).and_then(|inv| dispatch(cli, &inv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
