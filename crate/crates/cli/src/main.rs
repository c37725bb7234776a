use std::process::ExitCode;

use aliascope_cli::{configure_threads, run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aliascope: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
