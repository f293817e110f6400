use std::process::ExitCode;

use advdmd_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    // clap prints usage errors to stderr and exits with 2
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
