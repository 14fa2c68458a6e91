use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use slim_core::embedding::Activation;
use slim_core::model::{HiddenWidth, OptimizerKind};
use slim_core::pooling::FeatureSet;
use slim_core::Variant;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "slim",
    version,
    about = "Graph classification with structural landmarks",
    args_override_self = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalArgs {
    /// Random seed for folds, initialization, shuffling and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (0 = all available cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    /// TOML file with `key = value` defaults, optionally grouped by
    /// `[global]` and `[<subcommand>]` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dataset root (falls back to SLIM_DATA_DIR, then ./data).
    #[arg(long, global = true, env = "SLIM_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,

    /// Directory receiving every output artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// 10-fold cross-validation with fold-averaged epoch selection.
    Cv(CvArgs),
    /// Train one model on the whole dataset and save it.
    Train(ModelArgs),
    /// Cross-validate once per landmark count.
    SweepK(SweepArgs),
    /// Landmark coherence sweep on a Gaussian mixture, or the analytic bound alone.
    Coherence(CoherenceArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Dump one graph's assignments and pooled features from a saved model.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Cv(_) => "cv",
            Command::Train(_) => "train",
            Command::SweepK(_) => "sweep-k",
            Command::Coherence(_) => "coherence",
            Command::Gradcheck(_) => "gradcheck",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Dataset directory name under the data root.
    #[arg(long, default_value = "MUTAG")]
    pub dataset: String,

    /// Number of structural landmarks K.
    #[arg(long = "k", default_value_t = 100)]
    pub k: usize,

    /// BFS hop count.
    #[arg(long, default_value_t = 3)]
    pub hops: usize,

    /// Substructure descriptor.
    #[arg(long, default_value = "node-distribution")]
    pub variant: Variant,

    /// Per-layer decay of the weighted-layer-sum variant.
    #[arg(long, default_value_t = 0.5)]
    pub layer_decay: f64,

    /// Embedding width d.
    #[arg(long, default_value_t = 32)]
    pub latent: usize,

    /// Encoder hidden width relative to the descriptor width (same, half, double).
    #[arg(long, default_value = "same")]
    pub hidden: HiddenWidth,

    /// Encoder activation (logistic, tanh).
    #[arg(long, default_value = "logistic")]
    pub activation: Activation,

    /// Classifier input (interaction, interaction-density-means).
    #[arg(long, default_value = "interaction")]
    pub features: FeatureSet,

    /// Optimizer (sgd, adagrad).
    #[arg(long, default_value = "sgd")]
    pub optimizer: OptimizerKind,

    /// Learning rate.
    #[arg(long, default_value_t = 5e-2)]
    pub lr: f64,

    #[arg(long, default_value_t = 300)]
    pub epochs: usize,

    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    /// Weight of the co-occurrence loss.
    #[arg(long, default_value_t = 0.01)]
    pub lambda_embed: f64,

    /// Weight of the clustering loss.
    #[arg(long, default_value_t = 0.01)]
    pub lambda_cluster: f64,

    /// Let held-out graphs contribute their unsupervised terms.
    #[arg(long)]
    pub semi_supervised: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct CvArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value_t = 10)]
    pub folds: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value_t = 10)]
    pub folds: usize,

    /// Comma-separated landmark counts.
    #[arg(long, default_value = "2,10,100,500")]
    pub ks: String,
}

#[derive(Debug, Args, Serialize)]
pub struct CoherenceArgs {
    /// Print the analytic lower bound for --d, --K and --cdcp-over-umax2 and exit.
    #[arg(long)]
    pub analytic_only: bool,

    /// Dimension for the analytic bound.
    #[arg(long, default_value_t = 2)]
    pub d: usize,

    /// Landmark count for the analytic bound.
    #[arg(long = "K", default_value_t = 8)]
    pub big_k: usize,

    /// The ratio C_d·C_p / u_max² for the analytic bound.
    #[arg(long = "cdcp-over-umax2", default_value_t = 1.0)]
    pub cdcp_over_umax2: f64,

    /// Comma-separated landmark counts for the sweep.
    #[arg(long, default_value = "2,4,8,16,32,64,128,256")]
    pub ks: String,

    /// Number of seeds per K (seeds run from --seed upwards).
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,

    /// Points drawn from the mixture per seed.
    #[arg(long, default_value_t = 2000)]
    pub points: usize,

    /// Standard deviation of each mixture component.
    #[arg(long, default_value_t = 0.5)]
    pub scale: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    /// Saved model written by `train`.
    #[arg(long)]
    pub model: PathBuf,

    #[arg(long, default_value = "MUTAG")]
    pub dataset: String,

    /// Graph index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub graph: usize,

    /// Also write the substructure matrix Z.
    #[arg(long)]
    pub with_z: bool,
}

/// Parses a comma-separated list of positive integers.
pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| format!("bad list entry {t:?}: {e}"))
        })
        .collect()
}
