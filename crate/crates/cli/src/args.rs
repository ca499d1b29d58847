//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use siphi_core::heads::{Arch, LayerMode, DIM_GRID};

#[derive(Debug, Parser)]
#[command(name = "siphi", version, about = "Train and evaluate intelligibility heads on frozen encoder features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (or a family of per-model datasets).
    Synth(SynthArgs),
    /// Listener-disjoint three-fold split of a manifest.
    Split(SplitArgs),
    /// Train one head on one fold and save its checkpoint.
    Train(TrainArgs),
    /// One row per encoder layer plus all layers fused.
    SweepLayers(SweepLayersArgs),
    /// One row per embedding width at a fixed layer mode.
    SweepDims(SweepDimsArgs),
    /// Score a saved checkpoint on one partition of a fold.
    Eval(EvalArgs),
    /// Fit softmax-weighted ensembles over every k-combination of models.
    Ensemble(EnsembleArgs),
    /// Cross-model summary and plain-text tables from sweep results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Directory that receives every artifact; created if missing.
    #[arg(long, default_value = "siphi-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Worker threads for sweeps.
    #[arg(long, env = "SIPHI_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split file from `split`; derived from --seed when omitted.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecipeKind {
    /// Full-size recipe: 50 epochs, batch 128, small learning rates.
    Full,
    /// Same schedule shapes at rates that converge on small datasets.
    Desk,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    #[arg(long, value_enum, default_value_t = RecipeKind::Full)]
    pub recipe: RecipeKind,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Temporal pooling factor applied before projection.
    #[arg(long, default_value_t = 20)]
    pub pool_factor: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long, default_value_t = 300)]
    pub samples: usize,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub frequencies: usize,
    #[arg(long, default_value_t = 27)]
    pub listeners: usize,
    #[arg(long, default_value_t = 18)]
    pub systems: usize,
    /// Standard deviation of score noise.
    #[arg(long, default_value_t = 2.0)]
    pub noise: f64,
    /// Layer carrying the signal; defaults to two thirds of the depth.
    #[arg(long)]
    pub informative_layer: Option<usize>,
    /// Comma-separated model names; writes one dataset per name sharing
    /// samples and scores, member i informative at layer i mod L.
    #[arg(long, value_delimiter = ',')]
    pub members: Vec<String>,
    /// Per-member corruption of the shared latent.
    #[arg(long, default_value_t = 0.3)]
    pub corruption: f64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    /// `all` or a layer index.
    #[arg(long, value_parser = parse_layer, default_value = "all")]
    pub layer: LayerMode,
    #[arg(long, default_value_t = DIM_GRID[0])]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

#[derive(Debug, Args)]
pub struct SweepLayersArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long, default_value_t = DIM_GRID[0])]
    pub dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    pub folds: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SweepDimsArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    /// Fixed layer mode; defaults to all layers.
    #[arg(long, value_parser = parse_layer, conflicts_with = "inherit")]
    pub layer: Option<LayerMode>,
    /// Take the layer mode from the best row of a WA-TGP layer sweep.
    #[arg(long)]
    pub inherit: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DIM_GRID)]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    pub folds: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, value_enum, default_value_t = PartitionArg::Test)]
    pub partition: PartitionArg,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest supplying target scores.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sweep result per member model; its best row is used. Repeatable.
    #[arg(long = "sweep", required = true)]
    pub sweeps: Vec<PathBuf>,
    #[arg(long)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sweep result files. Repeatable.
    #[arg(long = "sweep", required = true)]
    pub sweeps: Vec<PathBuf>,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|e: siphi_core::Error| e.to_string())
}

fn parse_layer(s: &str) -> Result<LayerMode, String> {
    s.parse().map_err(|e: siphi_core::Error| e.to_string())
}
