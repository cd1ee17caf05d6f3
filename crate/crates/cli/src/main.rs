#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod args;
mod commands;
mod failure;
mod run;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;

use args::{config_values, merge, Cli, Command};

fn resolve<T: Serialize + DeserializeOwned>(flags: &T, cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(path) => merge(flags, config_values(path, cli.command.name())?),
        None => merge(flags, Default::default()),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&resolve(a, cli)?),
        Command::Train(a) => commands::train(&resolve(a, cli)?),
        Command::FinetuneSecure(a) => commands::finetune_secure(&resolve(a, cli)?),
        Command::Bench(a) => commands::bench_cmd(&resolve(a, cli)?),
        Command::Certify(a) => commands::certify(&resolve(a, cli)?),
        Command::Gradcheck(a) => commands::gradcheck(&resolve(a, cli)?),
        Command::Report(a) => commands::report(&resolve(a, cli)?),
    }
}

/// The error chain, skipping causes already quoted by an outer message.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !out.contains(&c) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&c);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(failure::exit_code(&e) as u8)
        }
    }
}
