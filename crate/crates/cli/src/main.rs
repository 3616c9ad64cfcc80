use std::process::ExitCode;

use clap::Parser;
use mbct::commands::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = mbct::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
