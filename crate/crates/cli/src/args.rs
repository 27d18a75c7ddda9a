use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protoseg::data::Annotation;
use protoseg::inference::PrototypeMode;

#[derive(Parser, Debug)]
#[command(name = "protoseg", version, about = "Prototype-guided one-shot segmentation on synthetic shapes")]
pub struct Cli {
    /// TOML config file with optional [gen], [train], [eval] and [sweep] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on one split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out classes.
    Eval(EvalArgs),
    /// Short trainings over a parameter grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Image side length (multiple of 8).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub poly_power: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_mcl: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_mcl: bool,
    #[arg(long)]
    pub no_pff: bool,
    #[arg(long)]
    pub no_spt: bool,
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Sum the pixel losses instead of averaging them.
    #[arg(long)]
    pub sum_loss: bool,
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long)]
    pub validate_every: Option<usize>,
    #[arg(long)]
    pub validation_episodes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub split: usize,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtoArg {
    Support,
    Pseudo,
    Fused,
}

impl From<ProtoArg> for PrototypeMode {
    fn from(p: ProtoArg) -> Self {
        match p {
            ProtoArg::Support => PrototypeMode::Support,
            ProtoArg::Pseudo => PrototypeMode::Pseudo,
            ProtoArg::Fused => PrototypeMode::Fused,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AnnotationArg {
    Dense,
    Scribble,
    Bbox,
}

impl From<AnnotationArg> for Annotation {
    fn from(a: AnnotationArg) -> Self {
        match a {
            AnnotationArg::Dense => Annotation::Dense,
            AnnotationArg::Scribble => Annotation::Scribble,
            AnnotationArg::Bbox => Annotation::Bbox,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct EvalOverrides {
    #[arg(long)]
    pub runs: Option<usize>,
    /// Episodes per run.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub prototype: Option<ProtoArg>,
    /// Support annotation used at test time.
    #[arg(long, value_enum)]
    pub annotation: Option<AnnotationArg>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Draw this many supports per episode and use the first --shots, so
    /// reports for different --shots share queries.
    #[arg(long)]
    pub draw_shots: Option<usize>,
    /// With --shots > 1, also average in the pseudo-prototype.
    #[arg(long)]
    pub include_pseudo: bool,
    /// Average per-episode IoUs instead of pooling counts over the split.
    #[arg(long)]
    pub per_episode: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write every predicted mask as PNG under <out>/masks.
    #[arg(long)]
    pub save_masks: bool,
    #[command(flatten)]
    pub eval: EvalOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// λ for the multi-class loss.
    Lambda,
    /// Initial learning rate × batch size.
    LrBatch,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub split: usize,
    #[arg(long, value_enum)]
    pub grid: Grid,
    /// λ values (default: 0.01 0.05 0.075 0.09 0.1 0.15 0.2 0.3 0.5 0.75 1).
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Learning rates (default: lr0 × {1, 2, 4}).
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    /// Batch sizes (default: 1, 2, 4).
    #[arg(long, value_delimiter = ',')]
    pub batches: Option<Vec<usize>>,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Evaluation runs per grid point.
    #[arg(long)]
    pub eval_runs: Option<usize>,
    /// Evaluation episodes per run.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
}
