//! `longiflow`: dataset generation, training, evaluation, imputation,
//! generation and self-verification for flow-chain sequence models.

mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use longiflow::autodiff::Precision;

use commands::{data, eval, generate, impute, selftest, sweep, train};
use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "longiflow", version, about = "Flow-chain latent models for image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    MakeData(data::MakeDataArgs),
    /// Train a model from a config file.
    Train(train::TrainArgs),
    /// Importance-weighted per-frame NLL of a dataset split.
    EvalNll(eval::EvalNllArgs),
    /// Complete missing frames and pixels, against the random-index baseline.
    Impute(impute::ImputeArgs),
    /// Sample sequences, optionally through a given frame.
    Generate(generate::GenerateArgs),
    /// Run the 64-bit verification battery.
    Selftest(selftest::SelftestArgs),
    /// Expand list-valued config keys into training runs.
    Sweep(sweep::SweepArgs),
}

/// Applies `LONGIFLOW_THREADS` and `LONGIFLOW_PRECISION`.
fn apply_environment() -> Result<()> {
    if let Ok(v) = std::env::var("LONGIFLOW_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("LONGIFLOW_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::usage("LONGIFLOW_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    }
    let precision = match std::env::var("LONGIFLOW_PRECISION") {
        Ok(v) => Precision::parse(&v).map_err(|e| CliError::usage(format!("LONGIFLOW_PRECISION: {e}")))?,
        Err(_) => Precision::F32,
    };
    Precision::set_global(precision);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    apply_environment()?;
    match cli.command {
        Command::MakeData(a) => data::run(&a),
        Command::Train(a) => train::run(&a),
        Command::EvalNll(a) => eval::run(&a),
        Command::Impute(a) => impute::run(&a),
        Command::Generate(a) => generate::run(&a),
        Command::Selftest(a) => selftest::run(&a),
        Command::Sweep(a) => sweep::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
