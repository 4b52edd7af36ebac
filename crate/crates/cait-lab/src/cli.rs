//! Command-line interface definitions.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cait-lab",
    version,
    about = "LayerScale / class-attention transformer lab: training, sweeps, verification, analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus run CSVs.
    Train(TrainArgs),
    /// Run a strategy x depth comparison matrix.
    Sweep(SweepArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
    /// Export branch ratios, attention maps, saliency, and accounting
    /// tables from a checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    /// Model preset: toy-12/24/36, a published name (xxs-24 .. m-48), or
    /// `<name>-like` for published hyper-parameters on the toy backbone.
    #[arg(long, default_value = "toy-12")]
    pub preset: String,
    /// Residual weighting strategy (see `--help` for names).
    #[arg(long, default_value = "layerscale")]
    pub strategy: String,
    /// Init constant: channel init for LayerScale, scalar init for the
    /// adapted schemes. Defaults to the depth rule.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Uniform stochastic-depth rate. Defaults to the preset's value.
    #[arg(long)]
    pub drop_rate: Option<f64>,
    /// Constant added to the resolved drop rate (width adjustment).
    #[arg(long, default_value_t = 0.0)]
    pub drop_rate_adjust: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// `synthetic:seed=..,n=..,classes=..` or a raw-image directory.
    #[arg(long)]
    pub data: Option<String>,
    /// Output directory; all files are confined to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Branch-ratio snapshot period in epochs (0 disables).
    #[arg(long)]
    pub snapshot_period: Option<usize>,
    /// Class policy override: class-attention | average-pooling |
    /// insert-at-<k>.
    #[arg(long)]
    pub cls_policy: Option<String>,
    /// Reuse the channel-scaling diagonals of this checkpoint, frozen,
    /// with everything else freshly initialized.
    #[arg(long)]
    pub retrain_from: Option<PathBuf>,
    /// Allow the un-normalized `-original` strategy variants.
    #[arg(long)]
    pub allow_divergent: bool,
}

#[derive(Debug, Args, Clone)]
pub struct SweepArgs {
    /// Comma-separated strategy names.
    #[arg(long, default_value = "baseline,layerscale")]
    pub strategies: String,
    /// Comma-separated toy depths.
    #[arg(long, default_value = "12,24")]
    pub depths: String,
    /// Number of seeds per cell (seed_base, seed_base+1, ...).
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1)]
    pub seed_base: u64,
    /// Uniform stochastic-depth rate for every cell. Defaults to each
    /// depth's rule value.
    #[arg(long)]
    pub drop_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Samples in each cell's synthetic dataset.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long)]
    pub allow_divergent: bool,
}

#[derive(Debug, Args, Clone)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    #[arg(long, default_value = "verify-out")]
    pub out: PathBuf,
    /// Self-test hook: force the named suite to fail.
    #[arg(long, hide = true)]
    pub mutate: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the accounting table over the published presets.
    #[arg(long)]
    pub tables: bool,
    /// Which probe image to export attention/saliency for.
    #[arg(long, default_value_t = 0)]
    pub image: usize,
    /// Bilinear instead of nearest upsampling for saliency maps.
    #[arg(long)]
    pub bilinear: bool,
    /// Probe data: `synthetic:...` or a raw-image directory.
    #[arg(long)]
    pub data: Option<String>,
}
