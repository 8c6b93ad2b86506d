//! The synthetic toy task shared by the delta sweep, the baseline comparison
//! and the property checks.

use std::fmt::Write as _;

use crate::data::{gen_synthetic, split, Dataset, SyntheticSpec};
use crate::error::Result;
use crate::evaluation::{distractor_embeddings, evaluate, EvalConfig, EvalReport};
use crate::geometry::HypersphereVector;
use crate::losses::{LossKind, MarginConfig};
use crate::training::{train, TrainConfig, TrainOutcome};

pub const TOY_CLASSES: usize = 10;
pub const TOY_INPUT_DIM: usize = 16;
pub const TOY_SIGMA: f64 = 0.1;
pub const TOY_SAMPLES_PER_CLASS: usize = 100;
pub const TOY_TEST_FRACTION: f64 = 0.3;

pub fn toy_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        class_count: TOY_CLASSES,
        input_dim: TOY_INPUT_DIM,
        samples_per_class: TOY_SAMPLES_PER_CLASS,
        noise_sigma: TOY_SIGMA,
        seed,
    }
}

/// Stratified train/test split of the toy data for `seed`.
pub fn toy_split(seed: u64) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let ds = gen_synthetic(&toy_spec(seed))?;
    split(&ds, TOY_TEST_FRACTION, seed)
}

/// Default training config at radius 1 with the given loss, margin and seed.
pub fn toy_config(loss: LossKind, delta: f64, seed: u64) -> TrainConfig<f64> {
    TrainConfig {
        loss,
        margin: MarginConfig::for_radius(1.0).with_delta(delta),
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub loss: LossKind,
    pub delta: f64,
    pub seed: u64,
    pub rank1: f64,
    pub final_loss: f64,
    pub min_proxy_dist: f64,
}

impl SweepRow {
    pub const HEADER: &'static str = "delta,seed,rank1,final_loss,min_proxy_dist";

    pub fn csv_line(&self) -> String {
        format!(
            "{:?},{},{:?},{:?},{:?}",
            self.delta, self.seed, self.rank1, self.final_loss, self.min_proxy_dist
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{}\n", SweepRow::HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Distractor embeddings for a cell, uniform on the embedding sphere.
pub fn toy_distractors(config: &TrainConfig<f64>, count: usize) -> Vec<HypersphereVector<f64>> {
    distractor_embeddings(count, config.embedding_dim, config.radius, config.seed)
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: SweepRow,
    pub outcome: TrainOutcome<f64>,
    pub report: EvalReport,
}

/// Trains on the toy split for `seed` and evaluates on its held-out part
/// with `distractors` extra unlabeled inputs.
pub fn run_cell(config: &TrainConfig<f64>, distractors: usize, pairs: usize) -> Result<CellResult> {
    let (train_set, test_set) = toy_split(config.seed)?;
    let outcome = train(config, &train_set)?;
    let report = evaluate(
        &outcome.model,
        config.radius,
        &test_set.inputs,
        &test_set.labels,
        &toy_distractors(config, distractors),
        &EvalConfig {
            pairs_per_kind: pairs,
            seed: config.seed,
        },
    )?;
    let last = outcome.logs.last().expect("at least one epoch");
    let row = SweepRow {
        loss: config.loss,
        delta: config.margin.delta,
        seed: config.seed,
        rank1: report.rank1,
        final_loss: last.mean_loss,
        min_proxy_dist: last.min_pairwise_proxy_distance,
    };
    Ok(CellResult {
        row,
        outcome,
        report,
    })
}
