use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match hrkan_cli::run(hrkan_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
