//! `skinfuse` — dataset generation, training, evaluation, parameter audits,
//! and the ablation grid, all driven by one seed for exact reproducibility.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod manifest;
mod settings;

use clap::{Parser, Subcommand};
use skinfuse::Error;

#[derive(Parser)]
#[command(
    name = "skinfuse",
    version,
    about = "Two-branch skin-lesion classification with attention-based fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-modality dataset directory
    GenData(commands::gen_data::Args),
    /// Train a model and write a checkpoint, loss trace, and manifest
    Train(commands::train::Args),
    /// Evaluate a checkpoint: prediction dumps, weight search, metric tables
    Eval(commands::eval::Args),
    /// Print the parameter audit for a configuration
    Params(commands::params::Args),
    /// Train and evaluate every framework x fusion-block combination
    Ablate(commands::ablate::Args),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data::run(&args),
        Command::Train(args) => commands::train::run(&args),
        Command::Eval(args) => commands::eval::run(&args),
        Command::Params(args) => commands::params::run(&args),
        Command::Ablate(args) => commands::ablate::run(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) | Error::Contract(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
