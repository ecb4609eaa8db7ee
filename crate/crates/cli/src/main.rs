//! `hpipe`: exit 0 on success, 1 on a domain failure, 2 on a usage or I/O failure.

mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Domain(anyhow::Error),
    Usage(anyhow::Error),
}

impl Failure {
    pub fn domain(e: impl Into<anyhow::Error>) -> Self {
        Failure::Domain(e.into())
    }

    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Failure::Usage(e.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Domain(e) | Failure::Usage(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
