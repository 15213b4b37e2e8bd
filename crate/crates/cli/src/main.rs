//! Command-line front end: training, evaluation, prediction, and rationale
//! extraction as reproducible runs. Every subcommand resolves its settings
//! with flag > config file > default precedence, logs the resolved values,
//! and derives all randomness from the single seed, so a run can be
//! reconstructed from its log alone.
//!
//! Exit codes: 0 success, 1 usage error, 2 unreadable or malformed data.

mod config;
mod ops;

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use molproto::episodes::EpisodeError;
use molproto::mcts::MctsError;

fn main() {
    std::process::exit(run(std::env::args_os().collect()));
}

fn run(argv: Vec<OsString>) -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version land here too; those exit 0.
            let code = i32::from(err.use_stderr());
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => ops::train(args),
        Command::Eval(args) => ops::eval(args),
        Command::Predict(args) => ops::predict(args),
        Command::Rationale(args) => ops::rationale(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            1
        }
        Err(CliError::Data(message)) => {
            eprintln!("error: {message}");
            2
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Settings that make no sense, whether from a flag or a config key.
    Usage(String),
    /// Unreadable or malformed inputs: files, tables, SMILES, checkpoints.
    Data(String),
}

pub fn usage(err: impl std::fmt::Display) -> CliError {
    CliError::Usage(err.to_string())
}

pub fn data(err: impl std::fmt::Display) -> CliError {
    CliError::Data(err.to_string())
}

/// Training and evaluation errors split by blame: bad knob values are
/// usage errors, everything else is a data problem.
pub fn episode_err(err: EpisodeError) -> CliError {
    match err {
        EpisodeError::LearningRate(_)
        | EpisodeError::Patience
        | EpisodeError::ZeroShot
        | EpisodeError::ZeroRuns
        | EpisodeError::ValFraction(_) => usage(err),
        other => data(other),
    }
}

pub fn mcts_err(err: MctsError) -> CliError {
    match err {
        MctsError::SizeWindow { .. }
        | MctsError::ZeroIterations
        | MctsError::Exploration(_)
        | MctsError::Threshold(_) => usage(err),
        other => data(other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Format, String> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            other => Err(format!("expected 'text' or 'json', got '{other}'")),
        }
    }
}

#[derive(Parser)]
#[command(name = "molproto", version, about = "Few-shot molecular property prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model over the train-side tasks of a labeled table.
    Train(TrainArgs),
    /// Score a trained checkpoint on held-out tasks.
    Eval(EvalArgs),
    /// Positive-class probabilities for query molecules.
    Predict(PredictArgs),
    /// Extract high-scoring substructures from molecules.
    Rationale(RationaleArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Plain-text `key = value` settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled molecule table: header `smiles,task_*`, cells 1/0/empty.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Task split file: `train: a,b` and `test: c` lines.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Where the trained checkpoint lands (default checkpoint.json).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Optional JSON training log: per-episode losses, validation curve.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Optional sequence feature table, one `<smiles>\t<v1,...,vd>` per
    /// line, replacing the built-in hashed n-gram features.
    #[arg(long)]
    pub external_features: Option<PathBuf>,
    /// Seed for every random draw in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Support shots per class.
    #[arg(long)]
    pub k: Option<usize>,
    /// Query molecules per training episode.
    #[arg(long)]
    pub train_query: Option<usize>,
    /// Gradient step size.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training episode budget (early stopping may use fewer).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Validation checks without improvement tolerated before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fraction of train tasks held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Graph embedding width.
    #[arg(long)]
    pub d_g: Option<usize>,
    /// Message-passing rounds in the graph encoder.
    #[arg(long)]
    pub gin_layers: Option<usize>,
    /// Hashed n-gram bucket count before reduction.
    #[arg(long)]
    pub hash_dim: Option<usize>,
    /// Sequence feature width after reduction.
    #[arg(long)]
    pub d_a: Option<usize>,
    /// Attention heads in the fusion block.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Lower bound of the attention rescaling range.
    #[arg(long)]
    pub beta_min: Option<f64>,
    /// Upper bound of the attention rescaling range.
    #[arg(long)]
    pub beta_max: Option<f64>,
    /// Scaling factor k in the beta schedule.
    #[arg(long)]
    pub beta_k: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Plain-text `key = value` settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint to score.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled molecule table holding the held-out tasks.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Task split file; its `test:` side names the tasks to score.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Comma-separated task names to score; overrides --split. With
    /// neither, every task in the table is scored.
    #[arg(long)]
    pub tasks: Option<String>,
    /// Seed for the support draws.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Support shots per class.
    #[arg(long)]
    pub k: Option<usize>,
    /// Independent support redraws per task.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Worker threads; results merge in deterministic order.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Query size cap per episode.
    #[arg(long)]
    pub query: Option<usize>,
    /// Report format: text or json.
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Plain-text `key = value` settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint to predict with.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled support table (same format as --dataset).
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Task column of the support table to use; optional when the table
    /// has exactly one task.
    #[arg(long)]
    pub task: Option<String>,
    /// Query molecules, one SMILES per line.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output format: text or json.
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Args)]
pub struct RationaleArgs {
    /// Plain-text `key = value` settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint that scores subgraphs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled support table the class prototypes are built from.
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Task column of the support table to use; optional when the table
    /// has exactly one task.
    #[arg(long)]
    pub task: Option<String>,
    /// Molecules to explain, one SMILES per line.
    #[arg(long)]
    pub molecules: Option<PathBuf>,
    /// Score threshold a subgraph must clear to be reported.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Largest rationale size in atoms.
    #[arg(long)]
    pub max_atoms: Option<usize>,
    /// Smallest rationale size in atoms.
    #[arg(long)]
    pub min_atoms: Option<usize>,
    /// Exploration constant of the selection rule.
    #[arg(long)]
    pub c_puct: Option<f64>,
    /// Search rollouts per molecule.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Output format: text or json.
    #[arg(long)]
    pub format: Option<Format>,
}
