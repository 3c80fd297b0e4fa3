use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Clone, Parser)]
#[command(
    name = "procwarm",
    version,
    about = "Procedural warm-up for vision transformers"
)]
pub struct Cli {
    /// Global seed for every stage that does not set its own.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Root directory for outputs.
    #[arg(long, global = true, env = "PROCWARM_OUT_DIR", default_value = "runs")]
    pub out_dir: PathBuf,
    /// Single-threaded execution with zeroed wall-clock fields, for
    /// bit-reproducible artifacts.
    #[arg(long, global = true)]
    pub reference_mode: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample a masked corpus from a grammar.
    Generate(GenerateArgs),
    /// Summary statistics of a stored corpus.
    Stats(StatsArgs),
    /// Masked-token warm-up of a fresh or given warm-up checkpoint.
    Warmup(WarmupArgs),
    /// Apply a surgery plan to a checkpoint.
    Surgery(SurgeryArgs),
    /// Image classification training of a vision checkpoint.
    Finetune(FinetuneArgs),
    /// Accuracy curves and a final-accuracy table across runs.
    Report(ReportArgs),
    /// generate → warmup → surgery → finetune (warm and random) → report.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GrammarArgs {
    /// ww, dyck or dyck-shuffle.
    #[arg(long, default_value = "dyck")]
    pub language: String,
    /// Bracket pairs for the Dyck languages.
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    /// Alphabet size for WW.
    #[arg(long, default_value_t = 128)]
    pub vocab: usize,
    #[arg(long, default_value_t = 196)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.6)]
    pub p_open: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mask_ratio: f64,
    /// none or shuffled.
    #[arg(long, default_value = "none")]
    pub ablation: String,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub grammar: GrammarArgs,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Output directory name under the output root.
    #[arg(long, default_value = "corpus")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    pub corpus: PathBuf,
}

/// Flags mirroring the training configuration; each overrides the config
/// file, which overrides the stage defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Flat `key = value` file with `train.*` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Args)]
pub struct WarmupArgs {
    /// Stored corpus; without it examples are generated on the fly.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub grammar: GrammarArgs,
    /// Start from this warm-up checkpoint instead of a fresh one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Model preset: desk or vit-t.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Patch size carried into the vision stage after surgery.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Derive the step count from a vision budget of this many images at
    /// the 1% ratio.
    #[arg(long)]
    pub budget_images: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "warmup")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct SurgeryArgs {
    /// Input checkpoint directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Plan file; defaults to `reset` then `retag stage=vision`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value = "surgery")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    /// Vision-stage checkpoint to train.
    #[arg(long, conflicts_with = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Start from a fresh vision model instead.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Patch size override for `--random-init`.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Raw-tensor training set; without it the synthetic shapes task is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub train_images: usize,
    #[arg(long, default_value_t = 500)]
    pub test_images: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "finetune")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// `NAME=DIR[,DIR...]`; several directories are averaged as seeds.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    /// Run that deltas are computed against; defaults to the first.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value = "report")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Flat `key = value` pipeline description.
    #[arg(long)]
    pub config: Option<PathBuf>,
}
