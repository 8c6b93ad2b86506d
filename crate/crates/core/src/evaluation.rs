//! Verification (ROC, TAR@FAR) and closed-set identification with
//! distractors, both scored by cosine similarity.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::random_unit_inputs;
use crate::error::{NptError, Result};
use crate::geometry::{normalize_to_sphere, HypersphereVector};
use crate::matrix::Matrix;
use crate::model::EmbedderModel;
use crate::scalar::{dot, Scalar};

/// Runs the model and projects every output row onto the sphere.
pub fn embed_all<T: Scalar>(
    model: &EmbedderModel<T>,
    inputs: &Matrix<T>,
    radius: T,
) -> Result<Vec<HypersphereVector<T>>> {
    let raw = model.embed(inputs)?;
    raw.iter_rows()
        .enumerate()
        .map(|(index, row)| match normalize_to_sphere(row, radius) {
            Err(NptError::ZeroVector { .. }) => Err(NptError::ZeroEmbedding { index }),
            other => other,
        })
        .collect()
}

fn cosine<T: Scalar>(a: &HypersphereVector<T>, b: &HypersphereVector<T>) -> f64 {
    let c = dot(a.components(), b.components()) / (a.radius() * b.radius());
    c.as_f64().clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    /// `(far, tar)` with strictly increasing FAR; each FAR keeps its best TAR.
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
    /// `(far target, tar)` for 1e-1, 1e-2, ... down to the pair resolution.
    pub tar_at_far: Vec<(f64, f64)>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

impl VerificationReport {
    /// TAR at the largest achievable FAR not above `far`.
    pub fn tar_at(&self, far: f64) -> f64 {
        self.roc
            .iter()
            .take_while(|(f, _)| *f <= far)
            .last()
            .map_or(0.0, |&(_, t)| t)
    }
}

/// ROC from raw genuine and impostor scores. A pair is accepted when its
/// score is at least the threshold; thresholds sweep every distinct score.
/// The AUC integrates the full threshold staircase by the trapezoid rule,
/// which credits tied genuine/impostor scores by one half.
pub fn roc_from_scores(genuine: &[f64], impostor: &[f64]) -> Result<VerificationReport> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(NptError::NoPairs);
    }
    let mut scored: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let mut staircase = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        staircase.push((fp as f64 / ni, tp as f64 / ng));
    }

    let auc = staircase
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();

    let mut roc: Vec<(f64, f64)> = Vec::new();
    for &(far, tar) in &staircase {
        match roc.last_mut() {
            Some(last) if last.0 == far => last.1 = last.1.max(tar),
            _ => roc.push((far, tar)),
        }
    }

    let mut report = VerificationReport {
        roc,
        auc,
        tar_at_far: Vec::new(),
        n_genuine: genuine.len(),
        n_impostor: impostor.len(),
    };
    let mut target = 0.1;
    loop {
        report.tar_at_far.push((target, report.tar_at(target)));
        target /= 10.0;
        if target * ni < 1.0 {
            break;
        }
    }
    Ok(report)
}

pub type IndexPairs = Vec<(usize, usize)>;

/// Embeddings tagged with their identity.
pub type Labeled<T> = Vec<(usize, HypersphereVector<T>)>;

/// Genuine and impostor index pairs, at most `per_kind` of each, drawn
/// without replacement.
pub fn sample_pairs(labels: &[usize], seed: u64, per_kind: usize) -> (IndexPairs, IndexPairs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut genuine_all: Vec<(usize, usize)> = Vec::new();
    for members in by_class.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                genuine_all.push((i, j));
            }
        }
    }
    let genuine: Vec<_> = if genuine_all.len() <= per_kind {
        genuine_all
    } else {
        let mut picked: Vec<_> = sample(&mut rng, genuine_all.len(), per_kind)
            .into_iter()
            .map(|k| genuine_all[k])
            .collect();
        picked.sort_unstable();
        picked
    };

    let total_pairs = n * n.saturating_sub(1) / 2;
    let genuine_total: usize = by_class
        .values()
        .map(|m| m.len() * (m.len().saturating_sub(1)) / 2)
        .sum();
    let impostor_total = total_pairs - genuine_total;
    let impostor = if impostor_total <= per_kind.saturating_mul(4) {
        let mut all = Vec::with_capacity(impostor_total);
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] != labels[j] {
                    all.push((i, j));
                }
            }
        }
        if all.len() > per_kind {
            all.shuffle(&mut rng);
            all.truncate(per_kind);
            all.sort_unstable();
        }
        all
    } else {
        // sparse regime: rejection sampling is cheap and never stalls
        let mut seen = HashSet::with_capacity(per_kind);
        let mut picked = Vec::with_capacity(per_kind);
        while picked.len() < per_kind {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j || labels[i] == labels[j] {
                continue;
            }
            let pair = (i.min(j), i.max(j));
            if seen.insert(pair) {
                picked.push(pair);
            }
        }
        picked.sort_unstable();
        picked
    };
    (genuine, impostor)
}

/// Samples pairs and scores them by cosine similarity.
pub fn verification_roc<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    pair_seed: u64,
    pairs_per_kind: usize,
) -> Result<VerificationReport> {
    if embeddings.len() != labels.len() {
        return Err(NptError::DimensionMismatch {
            expected: embeddings.len(),
            got: labels.len(),
        });
    }
    let (gp, ip) = sample_pairs(labels, pair_seed, pairs_per_kind);
    let score = |&(i, j): &(usize, usize)| cosine(&embeddings[i], &embeddings[j]);
    let genuine: Vec<f64> = gp.iter().map(score).collect();
    let impostor: Vec<f64> = ip.iter().map(score).collect();
    roc_from_scores(&genuine, &impostor)
}

/// Fraction of probes whose single most similar entry among gallery and
/// distractors is their own gallery entry. Any tie counts against the probe.
pub fn rank1_identification<T: Scalar>(
    gallery: &[(usize, HypersphereVector<T>)],
    probes: &[(usize, HypersphereVector<T>)],
    distractors: &[HypersphereVector<T>],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(NptError::InvalidArgument("no probes".into()));
    }
    let mut own: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, (label, _)) in gallery.iter().enumerate() {
        if own.insert(*label, k).is_some() {
            return Err(NptError::InvalidArgument(format!(
                "gallery has more than one entry for identity {label}"
            )));
        }
    }
    let mut correct = 0usize;
    for (label, probe) in probes {
        let &k = own
            .get(label)
            .ok_or(NptError::MissingGalleryIdentity(*label))?;
        let target = cosine(probe, &gallery[k].1);
        let beaten = gallery
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != k)
            .map(|(_, (_, e))| e)
            .chain(distractors)
            .any(|e| cosine(probe, e) >= target);
        if !beaten {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub pairs_per_kind: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs_per_kind: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub verification: VerificationReport,
    pub rank1: f64,
    pub n_probes: usize,
    pub n_distractors: usize,
}

impl EvalReport {
    /// `far,tar` rows.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("far,tar\n");
        for (far, tar) in &self.verification.roc {
            let _ = writeln!(s, "{far:?},{tar:?}");
        }
        s
    }

    /// `key,value` rows.
    pub fn report_csv(&self) -> String {
        let v = &self.verification;
        let mut s = String::from("key,value\n");
        let _ = writeln!(s, "auc,{:?}", v.auc);
        for (far, tar) in &v.tar_at_far {
            let _ = writeln!(s, "tar_at_far_{far:e},{tar:?}");
        }
        let _ = writeln!(s, "rank1,{:?}", self.rank1);
        let _ = writeln!(s, "n_genuine,{}", v.n_genuine);
        let _ = writeln!(s, "n_impostor,{}", v.n_impostor);
        let _ = writeln!(s, "n_probes,{}", self.n_probes);
        let _ = writeln!(s, "n_distractors,{}", self.n_distractors);
        s
    }
}

/// One gallery sample per identity (seeded choice); every other sample is a probe.
pub fn gallery_split<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    seed: u64,
) -> (Labeled<T>, Labeled<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut is_gallery = vec![false; labels.len()];
    let mut gallery = Vec::new();
    for (&label, members) in &by_class {
        let pick = members[rng.random_range(0..members.len())];
        is_gallery[pick] = true;
        gallery.push((label, embeddings[pick].clone()));
    }
    let probes = (0..labels.len())
        .filter(|&i| !is_gallery[i])
        .map(|i| (labels[i], embeddings[i].clone()))
        .collect();
    (gallery, probes)
}

/// Uniformly distributed points on the radius-`radius` sphere in `dim` dimensions.
pub fn random_sphere_embeddings<T: Scalar>(
    count: usize,
    dim: usize,
    radius: T,
    seed: u64,
) -> Vec<HypersphereVector<T>> {
    random_unit_inputs::<T>(count, dim, seed)
        .iter_rows()
        .map(|row| normalize_to_sphere(row, radius).expect("unit rows are nonzero"))
        .collect()
}

/// Distractor set used by the identification protocol for a run seed.
pub fn distractor_embeddings<T: Scalar>(
    count: usize,
    dim: usize,
    radius: T,
    seed: u64,
) -> Vec<HypersphereVector<T>> {
    random_sphere_embeddings(count, dim, radius, seed ^ 0xD157_AC70)
}

/// Full protocol on a labeled evaluation set plus unlabeled distractor embeddings.
pub fn evaluate<T: Scalar>(
    model: &EmbedderModel<T>,
    radius: T,
    inputs: &Matrix<T>,
    labels: &[usize],
    distractors: &[HypersphereVector<T>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let embeddings = embed_all(model, inputs, radius)?;
    if let Some(d) = distractors.iter().find(|d| d.dim() != model.output_dim()) {
        return Err(NptError::DimensionMismatch {
            expected: model.output_dim(),
            got: d.dim(),
        });
    }
    let verification = verification_roc(&embeddings, labels, cfg.seed, cfg.pairs_per_kind)?;
    let (gallery, probes) = gallery_split(&embeddings, labels, cfg.seed);
    let rank1 = rank1_identification(&gallery, &probes, distractors)?;
    Ok(EvalReport {
        verification,
        rank1,
        n_probes: probes.len(),
        n_distractors: distractors.len(),
    })
}
