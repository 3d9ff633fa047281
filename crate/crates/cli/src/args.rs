use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "foodgan", version, about = "Conditional any-resolution GAN toolkit")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural toy dataset and its manifest.
    MakeToy(MakeToyArgs),
    /// Scan class folders and write a JSON-lines manifest.
    PrepareData(PrepareDataArgs),
    /// Train a generator (global or patch stage).
    Train(TrainArgs),
    /// Render images from a checkpoint.
    Generate(GenerateArgs),
    /// Full-frame FID of a checkpoint against a manifest's LR images.
    EvalFid(EvalFidArgs),
    /// Patch-FID over the native-resolution records of a manifest.
    EvalPfid(EvalPfidArgs),
    /// Classifier study over real and synthetic training arms.
    Augment(AugmentArgs),
    /// Perceptual survey backend.
    Survey {
        #[command(subcommand)]
        command: SurveyCommand,
    },
    /// Class purity of conditional versus per-class generators.
    ProbeEntanglement(ProbeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ToyKind {
    TwoShapes,
    FineTexture,
    ThreeFoods,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    #[arg(long, value_enum)]
    pub kind: ToyKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub lr_size: u32,
    /// LR images per class (total LR images for fine-texture).
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// HR images per class; ignored for two-shapes.
    #[arg(long, default_value_t = 50)]
    pub hr_per_class: usize,
}

#[derive(Debug, Args)]
pub struct PrepareDataArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Comma-separated class names, in label order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 256)]
    pub lr_size: u32,
    #[arg(long, default_value_t = 512)]
    pub hr_min_side: u32,
    /// `SUBDIR=SOURCE` with SOURCE one of LR, HR, SYNTHETIC; repeatable.
    /// Defaults to class folders directly under the root, as LR.
    #[arg(long = "layout")]
    pub layout: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Global,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Multi,
    Single,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "global")]
    pub stage: StageArg,
    #[arg(long, value_enum, default_value = "multi")]
    pub mode: ModeArg,
    /// Class to train in single mode.
    #[arg(long)]
    pub class: Option<String>,
    /// TOML training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stage-1 checkpoint, required for the patch stage.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// `dotted.key=value` override; repeatable.
    #[arg(long = "set")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class name; optional for single-class checkpoints.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the last iterate instead of the best-scoring snapshot.
    #[arg(long)]
    pub latest: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `random-conv:SEED` or a full extractor descriptor.
    #[arg(long, default_value = "random-conv:0")]
    pub extractor: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub latest: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFidArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct EvalPfidArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, default_value_t = 2000)]
    pub patches: usize,
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct AugmentArgs {
    #[command(subcommand)]
    pub command: Option<AugmentCommand>,
    #[command(flatten)]
    pub run: AugmentRun,
}

#[derive(Debug, Args)]
pub struct AugmentRun {
    /// 1: real block, 2: real + synthetic, 3: two real blocks.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub arm: Option<u8>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Real manifest with LR and HR records.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest of synthetic images (needed for arm 2).
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// TOML with `[classifier]` and `[sizes]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set")]
    pub sets: Vec<String>,
    /// Train on permuted labels (chance-level control).
    #[arg(long)]
    pub shuffle_labels: bool,
    /// Output directory for the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AugmentCommand {
    /// Merge per-arm reports into a CSV table.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SurveyCommand {
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory with `synthetic/<class>/` and `real/<class>/` images.
    #[arg(long)]
    pub images: PathBuf,
    /// TOML deck config; the 88-item composition when absent.
    #[arg(long)]
    pub deck: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Response log; created if missing.
    #[arg(long, default_value = "survey_responses.jsonl")]
    pub log: PathBuf,
    /// Salt for opaque item ids.
    #[arg(long, default_value = "foodgan")]
    pub salt: String,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub multi: PathBuf,
    /// One single-class checkpoint per class.
    #[arg(long, num_args = 1.., required = true)]
    pub single: Vec<PathBuf>,
    /// Real images for training the oracle classifier.
    #[arg(long)]
    pub oracle_manifest: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub oracle_width: usize,
    #[arg(long, default_value_t = 100)]
    pub oracle_epochs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
