mod args;
mod commands;
mod svg;

use std::process::ExitCode;

use clap::Parser;
use csfp_core::Error;

use args::{Cli, Command};

/// 2: bad input or configuration, 3: degenerate data, 4: empty corpus.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::DegenerateInput(_) | Error::DegenerateData(_)) => 3,
        Some(Error::EmptyCorpus(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Map(c) => commands::map(c),
        Command::Loss(c) => commands::loss(c),
        Command::Corpus(c) => commands::corpus(c),
        Command::Oqa(c) => commands::oqa(c),
        Command::Tradeoff(c) => commands::tradeoff(c),
        Command::Layers(c) => commands::layers(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
