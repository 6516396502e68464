//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sfrg", version, about = "Saliency, structured attention graphs and explanation networks for image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and train the toy CNN.
    TrainToy(TrainToyArgs),
    /// Optimize a saliency mask for one image.
    Explain(ExplainArgs),
    /// Deletion/insertion curves of an existing heatmap against a random one.
    Evaluate(EvaluateArgs),
    /// Search minimal sufficient explanations and build the attention graph.
    Sag(SagArgs),
    /// Aggregate MSE statistics over a directory of images.
    Stats(StatsArgs),
    /// Explanation neural network commands.
    #[command(subcommand)]
    Xnn(XnnCommand),
    /// Serve attention graphs and what-if queries over HTTP.
    Serve(ServeArgs),
    /// Render a mask or a masked image as PNG.
    Render(RenderArgs),
    /// Re-run a recorded command and compare its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    /// Initial blur sigma for the baseline image.
    #[arg(long, default_value_t = 5.0)]
    pub baseline_sigma: f64,
    /// Largest accepted class confidence on the baseline.
    #[arg(long, default_value_t = 0.05)]
    pub baseline_epsilon: f64,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 7)]
    pub dataset_seed: u64,
    #[arg(long, default_value_t = 800)]
    pub train_count: usize,
    #[arg(long, default_value_t = 200)]
    pub heldout_count: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Also write the held-out images as PNGs plus labels.csv.
    #[arg(long)]
    pub dump_dataset: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    /// igos, igospp or mask2018.
    #[arg(long, default_value = "igospp")]
    pub method: String,
    #[arg(long, default_value_t = 7)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long)]
    pub lambda_ins: Option<f64>,
    #[arg(long)]
    pub tv_beta: Option<f64>,
    #[arg(long)]
    pub btv_sigma: Option<f64>,
    /// Unweighted TV instead of bilateral TV.
    #[arg(long, conflicts_with = "btv_sigma")]
    pub plain_tv: bool,
    #[arg(long)]
    pub btv_full_resolution: bool,
    #[arg(long)]
    pub ig_steps: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub metric_steps: Option<usize>,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    /// Heatmap as mask JSON or grayscale PNG (brighter is more important).
    #[arg(long)]
    pub heatmap: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = sfrg_core::metrics::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    /// Patch grid is GRID × GRID.
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
    #[arg(long, default_value_t = 50)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    #[arg(long, default_value_t = 1)]
    pub overlap: usize,
    #[arg(long, default_value_t = 10)]
    pub max_size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_roots: usize,
}

#[derive(Debug, Args)]
pub struct SagArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    /// Defaults to the image file stem.
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of PNG images (non-recursive).
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Debug, Subcommand)]
pub enum XnnCommand {
    /// Train a sparse reconstruction autoencoder explaining one class logit.
    Train(XnnTrainArgs),
}

#[derive(Debug, Args)]
pub struct XnnTrainArgs {
    /// Scorer whose hidden activations are explained.
    #[arg(long, required_unless_present = "task", conflicts_with = "task")]
    pub model: Option<PathBuf>,
    /// Synthetic activation task instead of a model: linear, shared or or.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seed of the synthetic corpus (model mode) or task data.
    #[arg(long, default_value_t = 7)]
    pub dataset_seed: u64,
    /// Rows used for training; the same number again is held out.
    #[arg(long, default_value_t = 200)]
    pub train_rows: usize,
    /// Activation width of synthetic tasks.
    #[arg(long, default_value_t = 8)]
    pub task_dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of PNG images; ids are file stems.
    #[arg(long)]
    pub images: PathBuf,
    /// Directory of SAG JSON files or of `sag` output directories.
    #[arg(long)]
    pub sags: Option<PathBuf>,
    /// Where to write the session manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Mask JSON to render as grayscale.
    #[arg(long, conflicts_with_all = ["image", "patches"])]
    pub mask: Option<PathBuf>,
    /// Render `1 − values` of the mask.
    #[arg(long, requires = "mask")]
    pub invert: bool,
    /// Output size HEIGHTxWIDTH for mask renders; default is the mask size.
    #[arg(long)]
    pub size: Option<String>,
    /// Image to mask with the kept patches.
    #[arg(long, requires = "patches")]
    pub image: Option<PathBuf>,
    /// Comma-separated kept patch indices (may be empty).
    #[arg(long, allow_hyphen_values = true)]
    pub patches: Option<String>,
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
    /// Blur sigma of the baseline for masked renders.
    #[arg(long, default_value_t = 5.0)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest file or the directory containing it.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
