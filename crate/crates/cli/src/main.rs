//! `npt`: data generation, training, evaluation, diagnostics, margin sweeps
//! and gradient checks from the command line.
//!
//! Every command accepts `--config FILE` with `key = value` lines whose keys
//! are the long flag names; flags given on the command line win. Each run
//! writes `manifest.txt` into its output directory, which is itself a valid
//! config file for repeating the run.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use npt_core::LossKind;

use config::{List, PathArg};

#[derive(Parser)]
#[command(
    name = "npt",
    version,
    about = "Hypersphere metric learning with the NPT loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset as CSV.
    GenData(GenDataArgs),
    /// Train an embedder and proxy bank.
    Train(TrainArgs),
    /// Verification ROC and rank-1 identification for a checkpoint.
    Eval(EvalArgs),
    /// Geometry diagnostics for a checkpoint on a dataset.
    Diagnose(DiagnoseArgs),
    /// Train and evaluate the toy task for every (delta, seed) pair.
    SweepDelta(SweepArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Default)]
pub struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Default)]
pub struct DatasetArgs {
    /// Dataset CSV, or IDX images when `--idx-labels` is given.
    #[arg(long)]
    pub dataset: Option<PathArg>,
    #[arg(long)]
    pub idx_labels: Option<PathArg>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Default)]
pub struct HyperArgs {
    /// npt, proxy_triplet, triplet, norm_softmax or margin_softmax.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Softmax scale.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Additive angular margin in radians.
    #[arg(long)]
    pub angular_margin: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated 1-based epochs.
    #[arg(long)]
    pub decay_epochs: Option<List<usize>>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    pub hidden: Option<List<usize>>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub proxy_weight_decay: Option<bool>,
    #[arg(long)]
    pub negative_proxy_grad: Option<bool>,
    /// Log D_n/D_k, gamma and proxy alignment every epoch.
    #[arg(long)]
    pub track_geometry: Option<bool>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub min_samples: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Hinge margin; defaults to radius^2 / 2.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Checkpoint path; defaults to `<out>/checkpoint.nptc`.
    #[arg(long)]
    pub checkpoint: Option<PathArg>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub checkpoint: Option<PathArg>,
    /// Number of random distractor embeddings.
    #[arg(long)]
    pub distractors: Option<usize>,
    /// Genuine and impostor pairs to sample, each.
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub checkpoint: Option<PathArg>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub min_samples: Option<usize>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated margins; defaults to 0, 0.5, 1 and 1.5 times radius^2.
    #[arg(long)]
    pub deltas: Option<List<f64>>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Check a single loss instead of all of them.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub trials: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::SweepDelta(a) => commands::sweep_delta(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
