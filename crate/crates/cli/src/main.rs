//! `gareader`: synthetic data, training, evaluation, ablations and attention plots.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A mistake in how the program was invoked, as opposed to a failure while running.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "gareader", version, about = "Gated-Attention Reader for cloze-style questions")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-hop cloze corpus split 80/10/10.
    Synth(SynthArgs),
    /// Train a reader; writes model.ckpt, last.ckpt and metrics.csv.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the chosen candidate and its probability for every example.
    Predict(PredictArgs),
    /// Train a grid of configurations over several seeds and compare them.
    Ablate(AblateArgs),
    /// Export attention matrices as CSV and SVG heatmaps.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub examples: usize,
    #[arg(long, default_value_t = 30)]
    pub entities: usize,
    #[arg(long, default_value_t = 4)]
    pub relations: usize,
    /// Reasoning hops needed to reach the answer (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub hops: usize,
    #[arg(long, default_value_t = 6)]
    pub facts: usize,
}

/// Configuration shared by `train` and `ablate`. Precedence: defaults, then
/// `--config`, then `--set`, then the named flags.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub valid_data: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Pretrained word vectors, one `token v1 .. vd` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of hops K.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// multiply, sum or concat.
    #[arg(long)]
    pub gating: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also report the one-sided proportion test against this accuracy.
    #[arg(long)]
    pub p0: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grid axis as KEY=V1,V2,...; the first configuration is the baseline.
    #[arg(long = "grid", value_name = "KEY=VALUES")]
    pub grid: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1")]
    pub seeds: String,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Example indices to export (0-based); defaults to the first.
    #[arg(long = "example")]
    pub examples: Vec<usize>,
    /// Export every example.
    #[arg(long, conflicts_with = "examples")]
    pub all: bool,
    /// Keep every document position as a row instead of candidate positions only.
    #[arg(long)]
    pub full_document: bool,
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
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Viz(a) => commands::viz(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
