mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// Bad flags, bad config values or a refused output directory (exit 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn run(cli: &Cli) -> anyhow::Result<()> {
    let path = cli.config.as_deref();
    let file = config::load(path)?;
    match &cli.command {
        Command::Gen(a) => commands::gen(a, &file, path),
        Command::Train(a) => commands::train(a, &file, path),
        Command::Eval(a) => commands::eval(a, &file, path),
        Command::Sweep(a) => commands::sweep(a, &file, path),
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    if err.downcast_ref::<UsageError>().is_some() {
        return true;
    }
    matches!(
        err.downcast_ref::<protoseg::Error>(),
        Some(protoseg::Error::InvalidConfig(_) | protoseg::Error::SplitIndex(_) | protoseg::Error::NegativeWeight(_))
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
