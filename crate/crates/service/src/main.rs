use std::process::ExitCode;

use clap::Parser;
use tab_service::cli::{run, Cli};

fn main() -> ExitCode {
    // usage errors exit with status 2 inside `parse`
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
