//! `reel`: the command-line pipeline. Subcommands cover the full lifecycle:
//! gen-data (synthetic corpus), pretrain (cross-entropy on the corpus),
//! finetune (reinforcement adaptation to one dataset), eval (benchmark
//! reports).

mod config;
mod eval;
mod finetune;
mod gen;
mod pretrain;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

/// Errors split by exit code: usage/config problems exit 2, runtime
/// failures exit 1.
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        CliError::Usage(e.into())
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CmdResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "reel", version, about = "Data-to-equation engine: learn symbolic formulas from tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (X, y, equation) pretraining corpus.
    GenData(gen::GenArgs),
    /// Pretrain the policy on a corpus with teacher-forced cross-entropy.
    Pretrain(pretrain::PretrainArgs),
    /// Reinforcement-finetune a pretrained checkpoint on one dataset.
    Finetune(finetune::FinetuneArgs),
    /// Evaluate a checkpoint on benchmark datasets and emit reports.
    Eval(eval::EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenData(args) => gen::run(args),
        Command::Pretrain(args) => pretrain::run(args),
        Command::Finetune(args) => finetune::run(args),
        Command::Eval(args) => eval::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `REEL_THREADS` caps worker parallelism; unset leaves the default pool.
fn init_threads() -> anyhow::Result<()> {
    match std::env::var("REEL_THREADS") {
        Ok(v) => {
            let threads: usize = v
                .parse()
                .map_err(|_| anyhow::anyhow!("REEL_THREADS must be a positive integer, got `{v}`"))?;
            if threads == 0 {
                anyhow::bail!("REEL_THREADS must be a positive integer, got 0");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()?;
            Ok(())
        }
        Err(_) => Ok(()),
    }
}
