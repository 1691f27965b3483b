//! `kla` — verification, equivalence sweeps, task data, toy training and
//! benchmarks for Kaczmarz linear attention.
//!
//! Exit codes: 0 success, 1 a check or metric failed, 2 usage or
//! configuration error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Common;

#[derive(Debug, Parser)]
#[command(name = "kla", version, about = "Kaczmarz linear attention toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the randomized theory suite and print a JSON report.
    Verify(VerifyArgs),
    /// Compare tokenwise, chunkwise and WY-reconstructed states.
    Equiv(EquivArgs),
    /// Generate a synthetic task dataset.
    Gen(GenArgs),
    /// Train a toy model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Time prefill and decode.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Replace the Kaczmarz coefficient with β = η; the suite must then fail.
    #[arg(long)]
    pub mutate: bool,
}

#[derive(Debug, Args)]
pub struct EquivArgs {
    /// Maximum allowed deviation.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// mqar, sniah, palindrome or stack.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// MQAR key-value pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// MQAR queries (at most the number of pairs).
    #[arg(long)]
    pub queries: Option<usize>,
    /// Number of stacks for the stack task.
    #[arg(long)]
    pub stacks: Option<usize>,
    /// Length multiplier: 1, 2, 4 or 8.
    #[arg(long, default_value_t = 1)]
    pub extrapolation: usize,
    #[arg(long)]
    pub valid_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use a constant learning rate instead of warmup + cosine.
    #[arg(long)]
    pub constant_lr: bool,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Initial decay-gate bias (0 starts the gate at α ≈ 0.5).
    #[arg(long, allow_hyphen_values = true)]
    pub alpha_bias: Option<f64>,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    pub target: Option<f64>,
    /// Validation samples per evaluation.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Exit 1 when accuracy falls below this value.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// prefill, decode or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    /// Prefill lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Decode context lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 256)]
    pub gen_tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    commands::init_threads()?;
    let common = cli.common.resolve()?;
    match cli.command {
        Command::Verify(a) => commands::verify(&common, &a),
        Command::Equiv(a) => commands::equiv(&common, &a),
        Command::Gen(a) => commands::gen(&common, &a),
        Command::Train(a) => commands::train(&common, &a),
        Command::Eval(a) => commands::eval(&common, &a),
        Command::Bench(a) => commands::bench(&common, &a),
    }
}
