//! `lvlmc` command-line workflow: synthetic data, local inference,
//! simulation and validation, one subcommand per stage.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lvlmc", version, about = "Locally varying linear model of coregionalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Infer local correlation models, factors and factor variograms.
    Infer(Common),
    /// Run the full pipeline and write realizations.
    Simulate(Common),
    /// Generate the synthetic deposit and drillhole samples.
    Synth(Common),
    /// Score realizations against held-out truth.
    Validate(Common),
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, overriding the config (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LVLMC_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Infer(c) => commands::infer(c),
        Command::Simulate(c) => commands::simulate(c),
        Command::Synth(c) => commands::synth(c),
        Command::Validate(c) => commands::validate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
