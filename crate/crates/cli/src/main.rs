//! `hscnet`: dataset generation, tree building, training, localization,
//! evaluation and plotting.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hscnet", version, about = "Hierarchical scene coordinate localization")]
pub struct Cli {
    /// Run configuration (TOML); command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the random choices of the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic room and render its train/test frames.
    GenScene(GenSceneArgs),
    /// Cluster training scene coordinates into a label tree.
    BuildTree(BuildTreeArgs),
    /// Train the hierarchical network.
    Train(TrainArgs),
    /// Train the regression-only baseline.
    BaselineTrain(TrainArgs),
    /// Localize a single frame.
    Localize(LocalizeArgs),
    /// Localize a whole split and write an accuracy report.
    Eval(EvalArgs),
    /// Render loss curves and cumulative error curves as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Room edge length in meters.
    #[arg(long, default_value_t = 4.0)]
    pub extent: f64,
    /// Surfels per square meter.
    #[arg(long, default_value_t = 2500.0)]
    pub density: f64,
    /// Room layout seed (defaults to --seed, then 1).
    #[arg(long)]
    pub room_seed: Option<u64>,
    /// Fine texture seed; rooms sharing it repeat each other's wall texture.
    #[arg(long)]
    pub detail_seed: Option<u64>,
    /// Room center, `x,y,z` in meters.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 0.0, 0.0])]
    pub origin: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub train_frames: usize,
    #[arg(long, default_value_t = 50)]
    pub test_frames: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Focal length in pixels (defaults to 0.875 of the width).
    #[arg(long)]
    pub focal: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildTreeArgs {
    /// Dataset directory; repeat to merge several scenes.
    #[arg(long = "dataset", required_unless_present = "points")]
    pub datasets: Vec<PathBuf>,
    /// Whitespace-separated xyz file used instead of datasets.
    #[arg(long, conflicts_with = "datasets")]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Branching factor per level, e.g. `4,4`.
    #[arg(long, value_delimiter = ',')]
    pub branching: Option<Vec<usize>>,
    /// k-means restarts per split.
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset; repeat for a merged multi-scene run.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Label tree (written when absent for the baseline).
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Output checkpoint; the network configuration is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Network configuration (TOML) overriding the run configuration.
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Regression loss weight.
    #[arg(long)]
    pub w_reg: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    /// Loss history CSV (defaults to the checkpoint path with `.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// `train` or `test`.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub hypotheses: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Frame id inside the split, e.g. `frame-000003`.
    #[arg(long)]
    pub frame: String,
    /// Write correspondences as CSV (u, v, x, y, z, residual, inlier).
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Report JSON path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Use the stored ground-truth poses as estimates (checks the metric plumbing).
    #[arg(long)]
    pub copy_gt: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Loss history CSV files.
    #[arg(long = "loss")]
    pub losses: Vec<PathBuf>,
    /// Report JSON files for cumulative error curves.
    #[arg(long = "report")]
    pub reports: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure kinds mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
