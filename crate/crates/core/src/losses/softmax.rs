//! Cross-entropy baselines over scaled cosine logits.

use std::f64::consts::PI;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::scalar::{axpy, dot, Scalar};

use super::{GradAccumulator, LabeledBatch, LossResult, MarginConfig, ProxyBank};

/// Floor on `sin(theta)` when differentiating `cos(acos(c) + m)` at `c = +-1`.
const MIN_SINE: f64 = 1e-12;

/// Cross-entropy over logits `s cos(z, W_j)`.
pub fn normalized_softmax_forward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    softmax(batch, bank, cfg, false, false)
}

pub fn normalized_softmax_backward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    softmax(batch, bank, cfg, false, true)
}

/// Cross-entropy where the true-class logit becomes `s cos(theta + m)`,
/// with `theta + m` capped at pi.
pub fn margin_softmax_forward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    softmax(batch, bank, cfg, true, false)
}

pub fn margin_softmax_backward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    softmax(batch, bank, cfg, true, true)
}

/// Target logit and its derivative with respect to the target cosine.
fn target_logit<T: Scalar>(cos: T, scale: T, margin: T) -> (T, T) {
    if margin == T::zero() {
        return (scale * cos, scale);
    }
    let c = cos.max(-T::one()).min(T::one());
    let theta = c.acos();
    let pi = T::lit(PI);
    if theta + margin >= pi {
        return (-scale, T::zero());
    }
    let sin_theta = (T::one() - c * c).sqrt().max(T::lit(MIN_SINE));
    (
        scale * (theta + margin).cos(),
        scale * (theta + margin).sin() / sin_theta,
    )
}

/// `-log softmax(logits)[target]`, accurate when the target dominates.
pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let others: T = exps
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &e)| e)
        .sum();
    let total = exps[target] + others;
    let loss = if logits[target] == max {
        others.ln_1p()
    } else {
        (max - logits[target]) + total.ln()
    };
    let probs = exps.into_iter().map(|e| e / total).collect();
    (loss, probs)
}

fn softmax<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
    with_margin: bool,
    with_grad: bool,
) -> Result<LossResult<T>> {
    let radius = bank.radius();
    cfg.validate(radius)?;
    batch.check_against(bank)?;
    let z = batch.normalized(radius)?;
    let w = bank.normalized()?;
    let b = batch.len();
    let classes = bank.class_count();
    let inv_b = T::one() / T::lit(b as f64);
    let r2 = radius * radius;
    let margin = if with_margin {
        cfg.angular_margin
    } else {
        T::zero()
    };

    let mut per_sample = Vec::with_capacity(b);
    let mut acc = GradAccumulator::new(b, bank.dim());
    let mut logits = vec![T::zero(); classes];
    let mut dlogit_dcos = vec![cfg.scale; classes];

    for (i, &label) in batch.labels.iter().enumerate() {
        let zi = z.row(i);
        for j in 0..classes {
            let cos = dot(zi, w.row(j)) / r2;
            if j == label {
                let (l, d) = target_logit(cos, cfg.scale, margin);
                logits[j] = l;
                dlogit_dcos[j] = d;
            } else {
                logits[j] = cfg.scale * cos;
                dlogit_dcos[j] = cfg.scale;
            }
        }
        let (loss, probs) = cross_entropy(&logits, label);
        per_sample.push(loss);

        if with_grad {
            for j in 0..classes {
                let dl = probs[j] - if j == label { T::one() } else { T::zero() };
                // cos = z.W / r^2
                let coef = dl * dlogit_dcos[j] * inv_b / r2;
                axpy(coef, w.row(j), acc.feature(i));
                axpy(coef, zi, acc.proxy(j));
            }
        }
    }

    let loss = per_sample.iter().copied().sum::<T>() * inv_b;
    let (grad_features, grad_proxies) = if with_grad {
        acc.finish(&batch.features, Some(bank.raw()), radius)
    } else {
        (Matrix::zeros(b, bank.dim()), Default::default())
    };
    Ok(LossResult {
        loss,
        per_sample,
        grad_features,
        grad_proxies,
        touched_negatives: vec![None; b],
    })
}
