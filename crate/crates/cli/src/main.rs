//! `lpn`: generate task data, train, evaluate and inspect latent program
//! networks.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input or failed check,
//! 3 numerical failure.

mod common;
mod diag;
mod error;
mod evaluate;
mod gen;
mod infer;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "lpn", version, about = "Latent program networks for grid tasks")]
struct Cli {
    /// Worker threads for parallel sections; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in the ARC JSON schema.
    Gen(gen::GenArgs),
    /// Train from a preset or config file, or resume a run.
    Train(train::TrainArgs),
    /// Score a checkpoint on a dataset under one or more inference modes.
    Eval(evaluate::EvalArgs),
    /// Accuracy across pattern color densities.
    Ood(evaluate::OodArgs),
    /// Training method by inference method accuracy table over seeds.
    Ablation(evaluate::AblationArgs),
    /// Predict test outputs for ARC-schema tasks.
    Infer(infer::InferCmdArgs),
    /// Diagnostics.
    #[command(subcommand)]
    Diag(diag::DiagCommand),
}

fn dispatch(cli: &Cli) -> CliResult {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Validation("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    match &cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => evaluate::run_eval(a),
        Command::Ood(a) => evaluate::run_ood(a),
        Command::Ablation(a) => evaluate::run_ablation(a),
        Command::Infer(a) => infer::run(a),
        Command::Diag(d) => diag::run(d),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
