//! `larmoe`: dataset generation, two-stage training, evaluation and
//! ablations from the command line.
//!
//! Human-readable progress goes to stderr. Each subcommand prints exactly
//! one JSON line to stdout when it succeeds.

mod ablate;
mod common;
mod eval;
mod gen;
mod pretrain;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::{CliError, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(
    name = "larmoe",
    version,
    about = "Latent-aligned soft mixture-of-experts lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scripted demonstrations and their phase-label sidecar.
    Gen(gen::GenArgs),
    /// Stage 1: teacher/student latent pretraining.
    Pretrain(pretrain::PretrainArgs),
    /// Stage 2: gated expert training from a pretrain checkpoint.
    Train(train::TrainArgs),
    /// Closed-loop evaluation of a trained checkpoint.
    Eval(eval::EvalArgs),
    /// Train and evaluate an ablation grid.
    Ablate(ablate::AblateArgs),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("LARMOE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::usage(format!(
            "LARMOE_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot build thread pool: {e}")))
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Pretrain(a) => pretrain::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Ablate(a) => ablate::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
