use std::process::ExitCode;

use clap::Parser;
use tqt_cli::app::{execute, init_threads, Cli, THREADS_ENV};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var(THREADS_ENV).ok();
    match init_threads(threads.as_deref()).and_then(|()| execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
