//! Geometry diagnostics for a trained snapshot: class-mean compactness,
//! proxy/mean alignment, nearest-negative-class distances and the margin
//! properties the NPT loss is meant to guarantee.

use std::fmt::Write as _;

use crate::error::{NptError, Result};
use crate::geometry::{sphere_distance_raw, HypersphereVector, MIN_NORM};
use crate::losses::{two_nearest_negatives, ProxyBank};
use crate::matrix::Matrix;
use crate::scalar::{axpy, dot, norm, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMean<T> {
    pub class: usize,
    pub mean: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> ClassMean<T> {
    /// A mean too short to define a direction (e.g. two antipodal samples).
    pub fn is_degenerate(&self) -> bool {
        !(norm(&self.mean) > T::lit(MIN_NORM))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans<T> {
    pub means: Vec<ClassMean<T>>,
    /// Classes present but below the sample threshold.
    pub excluded: Vec<usize>,
}

impl<T: Scalar> ClassMeans<T> {
    pub fn get(&self, class: usize) -> Option<&ClassMean<T>> {
        self.means.iter().find(|m| m.class == class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagReport {
    pub gamma_bar: f64,
    pub mean_norm_variance: f64,
    pub proxy_mean_cosine: f64,
    pub d_n: f64,
    pub d_k: f64,
    pub min_proxy_pair_distance: f64,
    /// `d_n < d_k`
    pub prop1_holds: bool,
    pub prop2_condition_fraction: f64,
    pub property1_violations: usize,
    pub classes_used: usize,
    /// Mean per-sample NPT loss of the snapshot at the given margin.
    pub mean_npt_loss: f64,
}

impl DiagReport {
    /// `key,value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        let rows: [(&str, String); 11] = [
            ("gamma_bar", format!("{:?}", self.gamma_bar)),
            (
                "mean_norm_variance",
                format!("{:?}", self.mean_norm_variance),
            ),
            ("proxy_mean_cosine", format!("{:?}", self.proxy_mean_cosine)),
            ("d_n", format!("{:?}", self.d_n)),
            ("d_k", format!("{:?}", self.d_k)),
            (
                "min_proxy_pair_distance",
                format!("{:?}", self.min_proxy_pair_distance),
            ),
            ("prop1_holds", self.prop1_holds.to_string()),
            (
                "prop2_condition_fraction",
                format!("{:?}", self.prop2_condition_fraction),
            ),
            (
                "property1_violations",
                self.property1_violations.to_string(),
            ),
            ("classes_used", self.classes_used.to_string()),
            ("mean_npt_loss", format!("{:?}", self.mean_npt_loss)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}

fn stack<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
) -> Result<(Matrix<T>, T)> {
    if embeddings.len() != labels.len() {
        return Err(NptError::DimensionMismatch {
            expected: embeddings.len(),
            got: labels.len(),
        });
    }
    let first = embeddings
        .first()
        .ok_or_else(|| NptError::InvalidArgument("no embeddings".into()))?;
    let rows: Vec<&[T]> = embeddings.iter().map(|e| e.components()).collect();
    Ok((Matrix::from_rows(&rows)?, first.radius()))
}

/// Arithmetic mean embedding per class; classes with fewer than
/// `min_samples` samples go to `excluded`.
pub fn class_means<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    min_samples: usize,
) -> Result<ClassMeans<T>> {
    let (z, _) = stack(embeddings, labels)?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sums = vec![vec![T::zero(); z.cols()]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &l) in z.iter_rows().zip(labels) {
        axpy(T::one(), row, &mut sums[l]);
        counts[l] += 1;
    }
    let mut out = ClassMeans {
        means: Vec::new(),
        excluded: Vec::new(),
    };
    for (class, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count == 0 {
            continue;
        }
        if count < min_samples.max(1) {
            out.excluded.push(class);
            continue;
        }
        let inv = T::one() / T::lit(count as f64);
        out.means.push(ClassMean {
            class,
            mean: sum.into_iter().map(|v| v * inv).collect(),
            count,
        });
    }
    Ok(out)
}

/// Mean of `|m_i| / r` and the population variance of `|m_i|`.
pub fn gamma_and_variance<T: Scalar>(means: &ClassMeans<T>, radius: T) -> Result<(T, T)> {
    if means.means.is_empty() {
        return Err(NptError::InvalidArgument("no class means".into()));
    }
    let k = T::lit(means.means.len() as f64);
    let norms: Vec<T> = means.means.iter().map(|m| norm(&m.mean)).collect();
    let avg = norms.iter().copied().sum::<T>() / k;
    let var = norms.iter().map(|&v| (v - avg) * (v - avg)).sum::<T>() / k;
    Ok((avg / radius, var))
}

/// Average cosine between each class's proxy and its normalized mean.
pub fn proxy_mean_cosine<T: Scalar>(bank: &ProxyBank<T>, means: &ClassMeans<T>) -> Result<T> {
    if means.means.is_empty() {
        return Err(NptError::InvalidArgument("no class means".into()));
    }
    let w = bank.normalized()?;
    let r = bank.radius();
    let mut total = T::zero();
    for m in &means.means {
        if m.class >= bank.class_count() {
            return Err(NptError::LabelOutOfRange {
                label: m.class,
                classes: bank.class_count(),
            });
        }
        if m.is_degenerate() {
            return Err(NptError::DegenerateMean(m.class));
        }
        let c = dot(w.row(m.class), &m.mean) / (r * norm(&m.mean));
        total = total + c.max(-T::one()).min(T::one());
    }
    Ok(total / T::lit(means.means.len() as f64))
}

/// Average distance from each sample to the samples of its nearest (`d_n`)
/// and second-nearest (`d_k`) negative classes, ranked by proxy distance.
///
/// Per-sample values are averaged within each class, then across classes.
/// A class mean stands in for its samples: the mean of `2r^2 - 2 z.x_j`
/// over class j is `2r^2 - 2 z.m_j`.
pub fn dn_dk<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    bank: &ProxyBank<T>,
) -> Result<(T, T)> {
    let classes = bank.class_count();
    if classes < 3 {
        return Err(NptError::TooFewClasses(classes));
    }
    let (z, r) = stack(embeddings, labels)?;
    let w = bank.normalized()?;
    let means = class_means(embeddings, labels, 1)?;
    let mut mean_of = vec![None; classes];
    for m in &means.means {
        if m.class < classes {
            mean_of[m.class] = Some(&m.mean);
        }
    }
    let two_r2 = T::lit(2.0) * r * r;
    let mut per_class = vec![(T::zero(), T::zero(), 0usize); classes];
    for (zi, &y) in z.iter_rows().zip(labels) {
        if y >= classes {
            return Err(NptError::LabelOutOfRange { label: y, classes });
        }
        let ((j, _), (k, _)) = two_nearest_negatives(zi, y, &w, r);
        let (Some(mj), Some(mk)) = (mean_of[j], mean_of[k]) else {
            continue;
        };
        let entry = &mut per_class[y];
        entry.0 = entry.0 + (two_r2 - T::lit(2.0) * dot(zi, mj));
        entry.1 = entry.1 + (two_r2 - T::lit(2.0) * dot(zi, mk));
        entry.2 += 1;
    }
    let used: Vec<_> = per_class.into_iter().filter(|e| e.2 > 0).collect();
    if used.is_empty() {
        return Err(NptError::InvalidArgument(
            "no sample has populated negative classes".into(),
        ));
    }
    let k = T::lit(used.len() as f64);
    let (mut dn, mut dk) = (T::zero(), T::zero());
    for (sn, sk, c) in used {
        let c = T::lit(c as f64);
        dn = dn + sn / c;
        dk = dk + sk / c;
    }
    let cap = T::lit(4.0) * r * r;
    let clamp = |v: T| v.max(T::zero()).min(cap);
    Ok((clamp(dn / k), clamp(dk / k)))
}

/// Fraction of samples for which the relaxed-alignment sufficient
/// condition holds: `d_e(W_j, m~_j) + d_e(W_k, m~_k) < d_e(z, W_k) - d_e(z, W_j)`.
/// Samples whose negative classes lack a usable mean are not counted.
pub fn check_prop2_condition<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    bank: &ProxyBank<T>,
    means: &ClassMeans<T>,
) -> Result<T> {
    let (z, r) = stack(embeddings, labels)?;
    let w = bank.normalized()?;
    let classes = bank.class_count();
    let mut offset = vec![None; classes];
    for m in means
        .means
        .iter()
        .filter(|m| m.class < classes && !m.is_degenerate())
    {
        let scale = r / norm(&m.mean);
        let tilde: Vec<T> = m.mean.iter().map(|&v| v * scale).collect();
        offset[m.class] = Some(sphere_distance_raw(w.row(m.class), &tilde, r).sqrt());
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (zi, &y) in z.iter_rows().zip(labels) {
        let ((j, dj), (k, dk)) = two_nearest_negatives(zi, y, &w, r);
        if k == usize::MAX {
            continue;
        }
        let (Some(oj), Some(ok)) = (offset[j], offset[k]) else {
            continue;
        };
        total += 1;
        let alpha = dk.sqrt() - dj.sqrt();
        if oj + ok < alpha {
            hits += 1;
        }
    }
    Ok(if total == 0 {
        T::zero()
    } else {
        T::lit(hits as f64 / total as f64)
    })
}

/// Samples whose NPT loss is below `delta` yet whose nearest proxy is not
/// their own, and the smallest squared distance between two proxies.
pub fn check_properties<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    bank: &ProxyBank<T>,
    delta: T,
) -> Result<(usize, T)> {
    let (z, r) = stack(embeddings, labels)?;
    let w = bank.normalized()?;
    let mut violations = 0;
    for (zi, &y) in z.iter_rows().zip(labels) {
        let loss = npt_term(zi, y, &w, r, delta);
        if loss < delta && nearest_proxy(zi, &w, r) != y {
            violations += 1;
        }
    }
    Ok((violations, bank.min_pairwise_distance()?))
}

fn npt_term<T: Scalar>(z: &[T], label: usize, w: &Matrix<T>, r: T, delta: T) -> T {
    let dp = sphere_distance_raw(z, w.row(label), r);
    let (_, dn) = crate::losses::nearest_negative_in(z, label, w, r);
    (dp - dn + delta).max(T::zero())
}

/// Index of the closest proxy, ties to the smallest index.
fn nearest_proxy<T: Scalar>(z: &[T], w: &Matrix<T>, r: T) -> usize {
    let mut best = (0, T::infinity());
    for (j, row) in w.iter_rows().enumerate() {
        let d = sphere_distance_raw(z, row, r);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Mean per-sample NPT loss of on-sphere embeddings.
pub fn mean_npt_loss<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    bank: &ProxyBank<T>,
    delta: T,
) -> Result<T> {
    let (z, r) = stack(embeddings, labels)?;
    let w = bank.normalized()?;
    let total: T = z
        .iter_rows()
        .zip(labels)
        .map(|(zi, &y)| npt_term(zi, y, &w, r, delta))
        .sum();
    Ok(total / T::lit(labels.len() as f64))
}

/// Every diagnostic on one snapshot.
pub fn diagnose<T: Scalar>(
    embeddings: &[HypersphereVector<T>],
    labels: &[usize],
    bank: &ProxyBank<T>,
    delta: T,
    min_samples: usize,
) -> Result<DiagReport> {
    let means = class_means(embeddings, labels, min_samples)?;
    let radius = bank.radius();
    let (gamma_bar, var) = gamma_and_variance(&means, radius)?;
    let pmc = proxy_mean_cosine(bank, &means)?;
    let (d_n, d_k) = dn_dk(embeddings, labels, bank)?;
    let prop2 = check_prop2_condition(embeddings, labels, bank, &means)?;
    let (violations, min_dist) = check_properties(embeddings, labels, bank, delta)?;
    let loss = mean_npt_loss(embeddings, labels, bank, delta)?;
    Ok(DiagReport {
        gamma_bar: gamma_bar.as_f64(),
        mean_norm_variance: var.as_f64(),
        proxy_mean_cosine: pmc.as_f64(),
        d_n: d_n.as_f64(),
        d_k: d_k.as_f64(),
        min_proxy_pair_distance: min_dist.as_f64(),
        prop1_holds: d_n < d_k,
        prop2_condition_fraction: prop2.as_f64(),
        property1_violations: violations,
        classes_used: means.means.len(),
        mean_npt_loss: loss.as_f64(),
    })
}
