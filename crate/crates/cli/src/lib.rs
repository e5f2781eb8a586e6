//! Command-line pipeline: simulate → track → calibrate → tune → evaluate →
//! report. Commands exchange plain files and each writes a `manifest.json`
//! next to its outputs.

pub mod commands;
pub mod dataset;
pub mod manifest;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GEOTRACK_OUT";

#[derive(Debug, Parser)]
#[command(name = "geotrack", version, about = "Multi-view Gaussian tracking pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-camera dataset.
    Simulate(SimulateArgs),
    /// Run the fusion filter over one split.
    Track(TrackArgs),
    /// Fit per-view covariance recalibration on a validation split.
    Calibrate(CalibrateArgs),
    /// Fine-tune acceleration noise and per-view calibration.
    Tune(TuneArgs),
    /// Score tracker output or one view's raw detections.
    Evaluate(EvaluateArgs),
    /// Tabulate the reports of several evaluation runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArg {
    /// Output directory; defaults to `$GEOTRACK_OUT/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario config (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NllModeArg {
    Filtered,
    Predictive,
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Tracker parameters (filter settings and calibration), e.g. from `tune`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Calibration file from `calibrate`.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Marginal used for the per-step NLL.
    #[arg(long, value_enum, default_value = "filtered")]
    pub nll_mode: NllModeArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Values of `a`: `lo:hi:logN`, `lo:hi:linN` or a comma list.
    #[arg(long, default_value = geotrack::calibration::DEFAULT_GRID_A)]
    pub grid_a: String,
    /// Values of `b`, same syntax as `--grid-a`.
    #[arg(long, default_value = geotrack::calibration::DEFAULT_GRID_B)]
    pub grid_b: String,
    /// Fit one `(a, b)` shared by every view.
    #[arg(long)]
    pub shared: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Initial tracker parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Initial calibration (ignored when `--params` is given).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub seq_len: usize,
    /// Frames between window starts; defaults to `--seq-len`.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub lr_drop_epoch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Shuffling seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Tracker marginals file written by `track`.
    #[arg(long, conflicts_with = "view", required_unless_present = "view")]
    pub predictions: Option<PathBuf>,
    /// Evaluate this view's raw detections instead.
    #[arg(long)]
    pub view: Option<String>,
    /// Similarity thresholds: `lo:hi:step` or a comma list.
    #[arg(long)]
    pub alpha_sweep: Option<String>,
    #[arg(long, default_value_t = geotrack::metrics::DEFAULT_MC_SAMPLES)]
    pub mc_samples: usize,
    /// Monte Carlo seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Evaluation output directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

/// A failed command with its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or invalid config, missing inputs: exit 2.
    Usage(anyhow::Error),
    /// Everything else: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub(crate) fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Track(a) => commands::track(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Tune(a) => commands::tune(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Report(a) => commands::report(&a),
    }
}
