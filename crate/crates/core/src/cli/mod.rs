//! The `aicac` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 training
//! failure, 4 I/O error, 5 degenerate data.

mod commands;
pub mod config;
mod dataset;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "aicac",
    version,
    about = "Coronary calcium regression from chest radiographs"
)]
pub struct Cli {
    /// TOML run configuration; unspecified keys take the preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: DICOM images, cohort and blob boxes.
    Synth,
    /// Split, fit statistics and label transform, and train the regressor.
    Train(TrainArgs),
    /// Score a trained model on a dataset.
    Evaluate(EvaluateArgs),
    /// k-fold cross-validation with per-fold and mean reports.
    Crossval(DataArgs),
    /// Kaplan-Meier, log-rank and Cox analysis of a cohort.
    Survival(SurvivalArgs),
    /// Grad-CAM saliency maps for DICOM images.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with `images/<id>.dcm` and `cohort.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FreezeArg {
    None,
    /// Train only the last dense block, the final normalization and the head.
    LastBlock,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub freeze: Option<FreezeArg>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Starts from these weights (a model directory) instead of a random
    /// initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// The held-out part of the model's own train/test split.
    Internal,
    /// Every item in the dataset.
    All,
    /// The ids listed in `--ids`, one per line.
    FileList,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "internal")]
    pub split: SplitArg,
    #[arg(long)]
    pub ids: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SurvivalArgs {
    /// Cohort CSV (`id,time_years,event,<covariates>`).
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Covariate defining the groups; overrides `survival.group_by`.
    #[arg(long)]
    pub group_by: Option<String>,
    /// Predictions CSV from `evaluate`; replaces the cohort's model scores
    /// and restricts the analysis to the predicted subjects.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// DICOM files to explain.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

/// Failure classes and their exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Config = 2,
    Training = 3,
    Io = 4,
    Degenerate = 5,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Config => "configuration error",
            Failure::Training => "training failed",
            Failure::Io => "I/O error",
            Failure::Degenerate => "degenerate data",
        })
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:#}", self.kind, self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags any error with a failure class.
pub trait Classify<T> {
    fn or_fail(self, kind: Failure) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_fail(self, kind: Failure) -> CliResult<T> {
        self.map_err(|e| CliError {
            kind,
            error: e.into(),
        })
    }
}

pub fn fail<T>(kind: Failure, msg: impl fmt::Display) -> CliResult<T> {
    Err(CliError {
        kind,
        error: anyhow::anyhow!("{msg}"),
    })
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind as u8)
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).or_else(|e| fail(Failure::Config, e))?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let Some(out) = cli.out else {
        return fail(Failure::Config, "--out is required");
    };
    match cli.command {
        Command::Synth => commands::synth(&cfg, &out),
        Command::Train(a) => commands::train(cfg, &a, &out),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a, &out),
        Command::Crossval(a) => commands::crossval(&cfg, &a, &out),
        Command::Survival(a) => commands::survival(&cfg, &a, &out),
        Command::Explain(a) => commands::explain(&cfg, &a, &out),
    }
}
