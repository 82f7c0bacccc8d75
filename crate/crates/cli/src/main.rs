//! `tgt`: command-line driver for the temporal-gating transformer toolkit.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tgt", version, about = "Next-app prediction with a temporal-gating transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic usage log and its Bayes-optimal HR@1.
    Synth(SynthArgs),
    /// Clean, sessionise, window and split a usage log into a bundle.
    Prepare(PrepareArgs),
    /// Train a model on a bundle.
    Train(TrainArgs),
    /// Score a checkpoint on a bundle split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate ablation variants.
    Ablate(AblateArgs),
    /// Train across values of one hyperparameter or data setting.
    Sweep(SweepArgs),
    /// Per-hour mean temporal gate of a checkpoint.
    Gates(GatesArgs),
    /// Evaluate the MFU or MRU baseline.
    Baseline(BaselineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator key-value file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (events.csv, oracle.txt).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Tsinghua,
    Lsapp,
    Synth,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitKind {
    Standard,
    Cold,
    Time,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Usage log (CSV).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "synth")]
    format: Format,
    /// Column mapping overrides (key-value file: user_col, time_col, ...).
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "standard")]
    split: SplitKind,
    /// Session idle gap in seconds.
    #[arg(long, default_value_t = 300)]
    dt: i64,
    /// Window length.
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Share of users used for training under the cold-start split.
    #[arg(long, default_value_t = 0.8)]
    train_users: f64,
    #[arg(long, default_value_t = 50)]
    min_user_events: usize,
    #[arg(long, default_value_t = 10)]
    min_app_events: usize,
    /// Keep only the first N events (by user, then time) after loading.
    #[arg(long)]
    max_rows: Option<usize>,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (bundle.jsonl, summary.txt).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Model key-value file.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Training key-value file.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Override any model or training key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Progress lines on standard error.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Bundle file or directory containing bundle.jsonl.
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Grid axis `key=v1,v2,...` (repeatable); trains the selected cell.
    #[arg(long, value_name = "KEY=VALUES")]
    grid: Vec<String>,
    /// Output directory (checkpoint.tgt, train_report.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Checkpoint file or directory containing checkpoint.tgt.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    ks: Vec<usize>,
    #[arg(long, value_enum, default_value = "test")]
    on: SplitName,
    /// MetricsReport JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Variant {
    Full,
    App,
    Duration,
    User,
    Gating,
    FeatMlp,
    HourOnehot,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Variants to train; each removes or swaps one component.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    which: Vec<Variant>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    ks: Vec<usize>,
    /// Output directory (one report per variant, ablation.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    Layers,
    Seqlen,
    Dropout,
    Dt,
    TrainFrac,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Prepared bundle; enough for the layers and dropout axes.
    #[arg(long, conflicts_with = "input")]
    bundle: Option<PathBuf>,
    /// Raw log, prepared afresh for every value.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "synth")]
    format: Format,
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "standard")]
    split: SplitKind,
    #[arg(long, default_value_t = 300)]
    dt: i64,
    #[arg(long, default_value_t = 5)]
    m: usize,
    #[arg(long, default_value_t = 0.8)]
    train_users: f64,
    #[arg(long, default_value_t = 50)]
    min_user_events: usize,
    #[arg(long, default_value_t = 10)]
    min_app_events: usize,
    #[arg(long)]
    max_rows: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    ks: Vec<usize>,
    /// CSV table path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GatesArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    on: SplitName,
    /// GateReport CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    Mfu,
    Mru,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_enum)]
    which: BaselineKind,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    ks: Vec<usize>,
    /// MetricsReport JSON path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gates(a) => commands::gates(a),
        Command::Baseline(a) => commands::baseline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
