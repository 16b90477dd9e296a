use std::process::ExitCode;

use clap::Parser;

use normaug_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("normaug: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
