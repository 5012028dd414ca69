//! `segopt`: optimize, resume, evaluate and inspect prompt optimization runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segopt_core::optimizer::{CheckpointError, OptimizerError};

use crate::config::Overrides;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        let msg = e.to_string();
        match e {
            OptimizerError::Config(_) | OptimizerError::Corpus(_) | OptimizerError::Segment(_) => CliError::Config(msg),
            OptimizerError::Eval(_) | OptimizerError::Backend(_) => CliError::Backend(msg),
            OptimizerError::Checkpoint(_) | OptimizerError::SplitMismatch(_) => CliError::Checkpoint(msg),
            OptimizerError::Drift(_) | OptimizerError::Io { .. } => CliError::Io(msg),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "segopt", version, about = "Segment-level prompt optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new optimization run.
    Optimize(OptimizeCmd),
    /// Continue a run from a checkpoint file.
    Resume {
        checkpoint: PathBuf,
    },
    /// Score a prompt on one split of a dataset.
    Evaluate(EvaluateCmd),
    /// Summarize a run directory from its event log.
    Report {
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct FlagArgs {
    /// Disable weighting of weak examples in the edit request.
    #[arg(long)]
    no_prioritize_weak: bool,
    /// Disable the structured reasoning scaffold in the edit request.
    #[arg(long)]
    no_structured_reasoning: bool,
    /// Send text only, even for examples with images.
    #[arg(long)]
    text_only: bool,
    #[arg(long, value_name = "N")]
    max_concurrency: Option<usize>,
}

impl FlagArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            no_prioritize_weak: self.no_prioritize_weak,
            no_structured_reasoning: self.no_structured_reasoning,
            text_only: self.text_only,
            max_concurrency: self.max_concurrency,
        }
    }
}

#[derive(Args)]
struct OptimizeCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    /// Replace an existing run directory with the same id.
    #[arg(long)]
    force: bool,
    /// Halt after this many iterations, leaving a resumable checkpoint.
    #[arg(long, value_name = "N")]
    stop_after: Option<u32>,
    #[command(flatten)]
    flags: FlagArgs,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    prompt_file: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    flags: FlagArgs,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Optimize(c) => commands::optimize(commands::OptimizeArgs {
            overrides: c.flags.overrides(),
            config: c.config,
            dataset: c.dataset,
            out: c.out,
            run_id: c.run_id,
            force: c.force,
            stop_after: c.stop_after,
        }),
        Command::Resume { checkpoint } => commands::resume(&checkpoint),
        Command::Evaluate(c) => commands::evaluate(commands::EvaluateArgs {
            overrides: c.flags.overrides(),
            config: c.config,
            dataset: c.dataset,
            prompt_file: c.prompt_file,
            split: c.split,
        }),
        Command::Report { run_dir } => commands::report(&run_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
