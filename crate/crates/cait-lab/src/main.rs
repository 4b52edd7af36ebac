use std::process::ExitCode;

use clap::Parser;

use cait_lab::cli::{Cli, Command};
use cait_lab::commands;

/// Cap rayon's intra-op parallelism from `CAIT_LAB_THREADS`.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("CAIT_LAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::Verify(args) => commands::verify::run(args),
        Command::Analyze(args) => commands::analyze::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
