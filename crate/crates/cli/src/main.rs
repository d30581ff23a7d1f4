use std::process::ExitCode;

use clap::Parser;
use env_logger::Env;

use rrl_cli::cli::{env_seed, SEED_ENV};
use rrl_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = env_seed(std::env::var(SEED_ENV).ok()).and_then(|seed| run(&cli, seed));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
