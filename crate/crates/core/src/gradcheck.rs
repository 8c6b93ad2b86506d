//! Central finite-difference verification of every loss's analytic gradient.
//!
//! Random configurations are drawn from a seeded generator. A configuration
//! is rejected (and redrawn) when it sits within `kink_margin` of a point
//! where the loss is not differentiable: a hinge at zero, a tie in a
//! nearest/farthest selection, or the cap on the angular-margin target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{NptError, Result};
use crate::geometry::sphere_distance_raw;
use crate::losses::{
    loss_dispatch, loss_forward, two_nearest_negatives, LabeledBatch, LossKind, MarginConfig,
    ProxyBank,
};
use crate::matrix::Matrix;
use crate::scalar::{dot, norm};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Minimum distance from any kink for a configuration to be used.
    pub kink_margin: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// gradient is numerically zero are compared absolutely.
    pub relative_floor: f64,
    pub max_batch: usize,
    pub max_classes: usize,
    pub max_dim: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-5,
            kink_margin: 1e-4,
            relative_floor: 1e-4,
            max_batch: 8,
            max_classes: 6,
            max_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub kind: LossKind,
    pub trials: usize,
    /// Configurations redrawn for sitting near a kink.
    pub rejected: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Instance {
    batch: LabeledBatch<f64>,
    bank: ProxyBank<f64>,
    cfg: MarginConfig<f64>,
}

fn random_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Matrix<f64> {
    let mut m = Matrix::zeros(rows, dim);
    for i in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // norms in [1, 2] keep the normalization Jacobian bounded
        let scale = rng.random_range(1.0..2.0) / norm(&v);
        for (dst, x) in m.row_mut(i).iter_mut().zip(v) {
            *dst = x * scale;
        }
    }
    m
}

fn draw<R: Rng>(kind: LossKind, gc: &GradcheckConfig, rng: &mut R) -> Result<Instance> {
    let classes = rng.random_range(2..=gc.max_classes.max(2));
    let dim = rng.random_range(2..=gc.max_dim.max(2));
    let min_batch = if kind == LossKind::Triplet { 3 } else { 1 };
    let batch_size = rng.random_range(min_batch..=gc.max_batch.max(min_batch));
    // fewer distinct labels than samples so in-batch positives exist
    let label_pool = if kind == LossKind::Triplet {
        classes.min(batch_size - 1).max(2)
    } else {
        classes
    };
    let labels = (0..batch_size)
        .map(|_| rng.random_range(0..label_pool))
        .collect();
    let radius = rng.random_range(0.5..1.5);
    let mut cfg = MarginConfig::for_radius(radius);
    cfg.delta = rng.random_range(0.05..1.5) * radius * radius;
    cfg.scale = rng.random_range(1.0..16.0);
    cfg.angular_margin = rng.random_range(0.1..0.8);
    Ok(Instance {
        batch: LabeledBatch::new(random_rows(batch_size, dim, rng), labels)?,
        bank: ProxyBank::new(random_rows(classes, dim, rng), radius)?,
        cfg,
    })
}

/// Distance from the nearest non-differentiable point of the loss.
fn kink_distance(kind: LossKind, inst: &Instance) -> Result<f64> {
    let r = inst.bank.radius();
    let z = inst.batch.normalized(r)?;
    let w = inst.bank.normalized()?;
    let delta = inst.cfg.delta;
    let mut closest = f64::INFINITY;
    match kind {
        LossKind::Npt | LossKind::ProxyTriplet => {
            for (i, &y) in inst.batch.labels.iter().enumerate() {
                let zi = z.row(i);
                let dp = sphere_distance_raw(zi, w.row(y), r);
                let ((_, d1), (_, d2)) = two_nearest_negatives(zi, y, &w, r);
                if kind == LossKind::Npt {
                    closest = closest.min((dp - d1 + delta).abs());
                    if d2.is_finite() {
                        closest = closest.min(d2 - d1);
                    }
                } else {
                    for j in (0..w.rows()).filter(|&j| j != y) {
                        let h = dp - sphere_distance_raw(zi, w.row(j), r) + delta;
                        closest = closest.min(h.abs());
                    }
                }
            }
        }
        LossKind::Triplet => {
            let labels = &inst.batch.labels;
            let mut any_valid = false;
            for a in 0..labels.len() {
                let mut pos: Vec<f64> = Vec::new();
                let mut neg: Vec<f64> = Vec::new();
                for j in (0..labels.len()).filter(|&j| j != a) {
                    let d = sphere_distance_raw(z.row(a), z.row(j), r);
                    if labels[j] == labels[a] {
                        pos.push(d);
                    } else {
                        neg.push(d);
                    }
                }
                if pos.is_empty() || neg.is_empty() {
                    continue;
                }
                any_valid = true;
                pos.sort_by(|x, y| y.total_cmp(x));
                neg.sort_by(f64::total_cmp);
                closest = closest.min((pos[0] - neg[0] + delta).abs());
                if pos.len() > 1 {
                    closest = closest.min(pos[0] - pos[1]);
                }
                if neg.len() > 1 {
                    closest = closest.min(neg[1] - neg[0]);
                }
            }
            if !any_valid {
                return Ok(0.0);
            }
        }
        LossKind::NormSoftmax => {}
        LossKind::MarginSoftmax => {
            let m = inst.cfg.angular_margin;
            for (i, &y) in inst.batch.labels.iter().enumerate() {
                let c = (dot(z.row(i), w.row(y)) / (r * r)).clamp(-1.0, 1.0);
                let theta = c.acos();
                closest = closest.min((theta + m - std::f64::consts::PI).abs());
                // theta(z) has a cone point where z is parallel to W_y; its
                // curvature grows like 1/theta, so distance is measured as theta^2
                closest = closest.min(theta * theta);
            }
        }
    }
    Ok(closest)
}

/// Checks `kind` on `gc.trials` accepted random configurations.
pub fn gradcheck(kind: LossKind, gc: &GradcheckConfig) -> Result<GradcheckOutcome> {
    if gc.trials == 0 {
        return Err(NptError::InvalidArgument("trials must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed ^ (kind as u64).wrapping_mul(0x9E37_79B9));
    let mut outcome = GradcheckOutcome {
        kind,
        trials: 0,
        rejected: 0,
        coordinates: 0,
        max_relative_error: 0.0,
        passed: true,
    };
    while outcome.trials < gc.trials {
        let inst = draw(kind, gc, &mut rng)?;
        if kink_distance(kind, &inst)? < gc.kink_margin {
            outcome.rejected += 1;
            if outcome.rejected > 1000 * gc.trials {
                return Err(NptError::InvalidArgument(
                    "could not draw configurations away from kinks".into(),
                ));
            }
            continue;
        }
        outcome.trials += 1;
        let worst = check_instance(kind, &inst, gc)?;
        outcome.coordinates += worst.1;
        outcome.max_relative_error = outcome.max_relative_error.max(worst.0);
    }
    outcome.passed = outcome.max_relative_error < gc.tolerance;
    Ok(outcome)
}

/// Returns the worst relative error and the number of coordinates checked.
fn check_instance(kind: LossKind, inst: &Instance, gc: &GradcheckConfig) -> Result<(f64, usize)> {
    let analytic = loss_dispatch(kind, &inst.batch, &inst.bank, &inst.cfg)?;
    if !analytic.all_finite() {
        return Ok((f64::INFINITY, 0));
    }
    let h = gc.step;
    let mut worst = 0.0f64;
    let mut count = 0;

    let f_at = |batch: &LabeledBatch<f64>, bank: &ProxyBank<f64>| -> Result<f64> {
        Ok(loss_forward(kind, batch, bank, &inst.cfg)?.loss)
    };

    for k in 0..inst.batch.features.as_slice().len() {
        let mut plus = inst.batch.clone();
        plus.features.as_mut_slice()[k] += h;
        let mut minus = inst.batch.clone();
        minus.features.as_mut_slice()[k] -= h;
        let numeric = (f_at(&plus, &inst.bank)? - f_at(&minus, &inst.bank)?) / (2.0 * h);
        let a = analytic.grad_features.as_slice()[k];
        worst = worst.max(relative_error(a, numeric, gc.relative_floor));
        count += 1;
    }

    let dense = analytic.dense_proxy_grad(inst.bank.class_count(), inst.bank.dim());
    for k in 0..dense.as_slice().len() {
        let mut plus = inst.bank.clone();
        plus.raw_mut().as_mut_slice()[k] += h;
        let mut minus = inst.bank.clone();
        minus.raw_mut().as_mut_slice()[k] -= h;
        let numeric = (f_at(&inst.batch, &plus)? - f_at(&inst.batch, &minus)?) / (2.0 * h);
        worst = worst.max(relative_error(
            dense.as_slice()[k],
            numeric,
            gc.relative_floor,
        ));
        count += 1;
    }
    Ok((worst, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_is_rejected() {
        let gc = GradcheckConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(gradcheck(LossKind::Npt, &gc).is_err());
    }

    #[test]
    fn seeded_runs_repeat() {
        let gc = GradcheckConfig {
            trials: 5,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(
            gradcheck(LossKind::Npt, &gc).unwrap(),
            gradcheck(LossKind::Npt, &gc).unwrap()
        );
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-3), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-3) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-4) - 1e-5).abs() < 1e-18);
    }
}
