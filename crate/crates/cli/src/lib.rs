//! `lmft` command-line tool: synthesize data, pseudo-label it, train,
//! evaluate, benchmark and visualize token selection.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config or input files),
//! 2 internal error.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lmft_core::adapt::{AdaptError, DropMode};
use lmft_core::config::ConfigError;
use lmft_core::data::DataError;

pub mod commands;
pub mod viz;

#[derive(Debug, Parser)]
#[command(name = "lmft", version, about = "Motion-focused tokenization with domain-adaptive training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic source/target dataset.
    Synth(SynthArgs),
    /// Write noisy oracle pseudo-labels for the unlabeled target split.
    LabelOracle(OracleArgs),
    /// Train a classifier and threshold policy.
    Train(TrainArgs),
    /// Accuracy and token statistics on a labelled split.
    Eval(EvalArgs),
    /// Cost and throughput of full, learned and random token budgets.
    Bench(BenchArgs),
    /// Per-frame PPM images of the token selection.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset spec (`key=value` lines).
    #[arg(long, visible_alias = "config")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of classes; defaults to one past the largest true label.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 0.4)]
    pub temp: f64,
    #[arg(long, default_value_t = 1.5)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training hyperparameters that can be set from the command line.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Fixed threshold in (0, 1), bypassing the policy.
    #[arg(long)]
    pub tau_override: Option<f64>,
    /// lmft, random or none.
    #[arg(long)]
    pub drop_mode: Option<DropMode>,
    #[arg(long)]
    pub gamma_c: Option<f64>,
    #[arg(long)]
    pub lambda_t: Option<f64>,
    #[arg(long = "lambda-L", visible_alias = "lambda-l")]
    pub lambda_l: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (`key=value` lines); flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides `data=` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pseudo-label JSONL; overrides `pseudo_labels=` in the config.
    #[arg(long)]
    pub pseudo_labels: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Where labelled evaluation clips come from.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ClipSource {
    /// Dataset directory; uses its validation manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub clips: ClipSource,
    #[arg(long)]
    pub tau_override: Option<f64>,
    #[arg(long)]
    pub drop_mode: Option<DropMode>,
    #[arg(long)]
    pub random_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub json: bool,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub clips: ClipSource,
    #[arg(long)]
    pub tau_override: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// One JSON object per method instead of a table.
    #[arg(long)]
    pub json: bool,
    /// CSV output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub tau_override: Option<f64>,
    #[arg(long)]
    pub drop_mode: Option<DropMode>,
    #[arg(long)]
    pub random_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `frame_NNN.ppm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) => f.write_str(m),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Model(_) | AdaptError::Nn(_) | AdaptError::Policy(_) | AdaptError::NonFinite(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match std::panic::catch_unwind(|| commands::execute(cli.command)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => 2,
    }
}
