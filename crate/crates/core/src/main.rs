//! Binary entry point; all command logic lives in the library's `cli`
//! module so it stays testable.

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = spdet::cli::Cli::parse();
    match spdet::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(spdet::cli::exit_code(&err))
        }
    }
}
