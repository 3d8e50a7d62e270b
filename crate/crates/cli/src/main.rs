//! `fiwkit` command-line entry point.

mod args;
mod commands;
mod data;
mod manifest;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::UsageError;
use manifest::RunManifest;

fn run(cli: Cli, manifest: RunManifest) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(a) => commands::train_cmd(a, manifest),
        Command::Ptq(a) => commands::ptq_cmd(a, manifest),
        Command::Fiw(a) => commands::fiw_cmd(a, manifest),
        Command::Params(a) => commands::params_cmd(a, manifest),
        Command::InferHe(a) => commands::infer_he_cmd(a, manifest),
        Command::Report(a) => report::report_cmd(a, manifest),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        // --help and --version exit 0, real usage errors exit 2.
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    match run(cli, RunManifest::new(&argv)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `fiwkit --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
