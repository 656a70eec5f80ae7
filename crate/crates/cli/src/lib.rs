//! Command-line runs of the flow → quadrant CNN → trajectory pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigError, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub(crate) fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub(crate) fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub(crate) fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("missing file {}", p.display())))
    }
}

pub(crate) fn require_dir(p: &Path) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("missing directory {}", p.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "deepavo", version, about = "Monocular visual odometry from dense optical flow")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dense LK flow between two images, written as .flo.
    Flow(FlowArgs),
    /// Renders a synthetic ground-plane sequence with ground truth.
    Synth(SynthArgs),
    /// Fits the network and writes a checkpoint plus history CSV.
    Train(TrainArgs),
    /// Predicts a trajectory from images or precomputed flows.
    Track(TrackArgs),
    /// Drift metrics of an estimated trajectory against ground truth.
    Eval(EvalArgs),
    /// X-Z trajectories as SVG.
    Plot(PlotArgs),
    /// Per-stage runtime over synthetic frames.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long = "in-a")]
    pub in_a: PathBuf,
    #[arg(long = "in-b")]
    pub in_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of frame pairs.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sequence directory, or `synthetic` to render one in memory.
    #[arg(long)]
    pub data: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// History CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long, conflicts_with = "flows", required_unless_present = "flows")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub flows: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub est: PathBuf,
    /// none | rigid | similarity
    #[arg(long)]
    pub align: Option<String>,
    /// Report path stem; `.csv` and `.json` are written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub poses: Vec<PathBuf>,
    /// Legend labels, one per pose file; defaults to file stems.
    #[arg(long, num_args = 1..)]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    /// `WxH`; defaults to the checkpoint's input size, else 1226x370.
    #[arg(long)]
    pub size: Option<String>,
    /// CSV report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, printing to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.exit_code() == 0 {
                write!(out, "{e}").map_err(runtime)?;
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    if let Some(c) = &cli.config {
        require_file(c)?;
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Flow(a) => commands::cmd_flow(&cfg, &a, out),
        Command::Synth(a) => commands::cmd_synth(&cfg, &a, out),
        Command::Train(a) => commands::cmd_train(&cfg, &a, out),
        Command::Track(a) => commands::cmd_track(&cfg, &a, out),
        Command::Eval(a) => commands::cmd_eval(&cfg, &a, out),
        Command::Plot(a) => commands::cmd_plot(&a, out),
        Command::Bench(a) => commands::cmd_bench(&cfg, &a, out),
    }
}
