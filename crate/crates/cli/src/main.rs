//! `fra`: synthesize data, train, augment, evaluate and gradient-check.

mod commands;
mod output;
mod plots;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "fra", version, about = "Pose-conditioned face embedding augmentation")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data generation, splitting, initialization, training and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset as embedding and landmark CSVs plus a factor-truth sidecar.
    Synth(SynthArgs),
    /// Train the autoencoder alone on landmark reconstruction.
    Pretrain(PretrainArgs),
    /// Jointly train autoencoder and combiner.
    Train(TrainArgs),
    /// Generate embeddings of dataset samples at requested target poses.
    Augment(AugmentArgs),
    /// Run the three-experiment evaluation protocol.
    Eval(EvalArgs),
    /// Compare analytic and central-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Embedding CSV; switches the data source to files.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Landmark CSV matching `--embeddings`.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Factor-truth JSON sidecar for file datasets.
    #[arg(long)]
    pub factor_truth: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    Mean,
    Flatten,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub emotions: Option<usize>,
    #[arg(long)]
    pub poses: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Train until this total step count.
    #[arg(long, conflicts_with = "epochs")]
    pub steps: Option<u64>,
    /// Train for this many passes over the training samples.
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Validation cadence in steps; 0 disables validation.
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Autoencoder warm-up steps before joint training.
    #[arg(long)]
    pub pretrain_steps: Option<u64>,
    /// Continue from a checkpoint; its configuration is used unless `--config` is given.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SubsetArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated target pose labels; defaults to every pose.
    #[arg(long, value_delimiter = ',')]
    pub poses: Option<Vec<String>>,
    /// Which identities' samples to augment.
    #[arg(long, value_enum, default_value = "all")]
    pub subset: SubsetArg,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "augmented.csv")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed of the identity split; defaults to the configured split seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Coordinates to check, sampled across every parameter tensor.
    #[arg(long, default_value_t = 64)]
    pub coords: usize,
    /// Gradients smaller than this are judged by absolute error `tol·floor`.
    #[arg(long, default_value_t = 1e-5)]
    pub floor: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Dropout rate; anything above 0 is refused because the check needs a deterministic loss.
    #[arg(long)]
    pub dropout: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fra: {e}");
            e.exit_code()
        }
    }
}
