//! Experiment harness behind the `maskopt` binary.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod experiment;

pub use experiment::Method;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const INTERNAL: i32 = 4;
}

/// Failures raised by the harness itself, classified by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Config(String),
    Data(String),
    Invariant(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Invariant(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

/// Map an error chain to its exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => exit::CONFIG,
                Failure::Data(_) => exit::DATA,
                Failure::Invariant(_) => exit::INTERNAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<maskopt::Error>() {
            return match e {
                maskopt::Error::RejectedConfig(_) => exit::CONFIG,
                _ => exit::DATA,
            };
        }
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return exit::CONFIG;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::DATA;
        }
    }
    exit::INTERNAL
}

#[derive(Debug, Parser)]
#[command(name = "maskopt", version, about = "Weakly supervised particle localisation experiments")]
pub struct Cli {
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the presence classifier on a dataset's train split.
    Train(TrainArgs),
    /// Detect particles in one split of a dataset.
    Detect(DetectArgs),
    /// Score a directory of detections against the annotations.
    Eval(EvalArgs),
    /// Run one ablation suite and print a table.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Weight file to write; a `.report.json` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for maskopt::synthdata::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Output directory for per-image detection files and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "opt")]
    pub method: Method,
    /// Relative error applied to the particle size, e.g. 0.2 for +20%.
    #[arg(long, default_value_t = 0.0)]
    pub size_error: f64,
    #[arg(long)]
    pub dump_heatmaps: bool,
    #[arg(long)]
    pub dump_trajectories: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Metrics JSON to write; the PR curve goes to `pr.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// One of: init, sigma_min, loss, fill, score_mode, pdf, size_error.
    #[arg(long)]
    pub suite: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Weight files, used in turn by the runs (give one per seed to pair
    /// each run with its own classifier).
    #[arg(long, required = true, num_args = 1..)]
    pub weights: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Number of seeded runs per variant.
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    /// Only use the first N images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// CSV file to write (the table is always printed).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// First run seed; run k uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Invariant(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    }
}
