//! Hinge losses against proxies: the nearest-negative-proxy form and the
//! all-negatives proxy-triplet form.

use crate::error::Result;
use crate::geometry::sphere_distance_raw;
use crate::matrix::Matrix;
use crate::scalar::{axpy, Scalar};

use super::{
    nearest_negative_in, GradAccumulator, LabeledBatch, LossResult, MarginConfig, ProxyBank,
};

#[derive(Clone, Copy)]
enum Negatives {
    Nearest,
    All,
}

/// Nearest-negative-proxy triplet loss (value only).
///
/// Per sample: `max(0, d(z, W_y) - d(z, W_n) + delta)` where `W_n` is the
/// nearest proxy of any other class. In unit-vector form this is
/// `2r^2 max(0, z^.W_n^ - z^.W_y^ + delta / 2r^2)`, so the radius only
/// scales the loss once `delta` is tied to `r^2`.
pub fn npt_forward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    hinge_loss(batch, bank, cfg, Negatives::Nearest, false)
}

/// [`npt_forward`] plus its subgradient. The argmin choosing `W_n` is held fixed.
pub fn npt_backward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    hinge_loss(batch, bank, cfg, Negatives::Nearest, true)
}

/// Proxy-triplet loss summed over every negative proxy (value only).
pub fn proxy_triplet_forward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    hinge_loss(batch, bank, cfg, Negatives::All, false)
}

pub fn proxy_triplet_backward<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    hinge_loss(batch, bank, cfg, Negatives::All, true)
}

fn hinge_loss<T: Scalar>(
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
    negatives: Negatives,
    with_grad: bool,
) -> Result<LossResult<T>> {
    let radius = bank.radius();
    cfg.validate(radius)?;
    batch.check_against(bank)?;
    let z = batch.normalized(radius)?;
    let w = bank.normalized()?;
    let b = batch.len();
    let inv_b = T::one() / T::lit(b as f64);
    let step = T::lit(2.0) * inv_b;

    let mut per_sample = Vec::with_capacity(b);
    let mut touched = Vec::with_capacity(b);
    let mut acc = GradAccumulator::new(b, bank.dim());

    for (i, &label) in batch.labels.iter().enumerate() {
        let zi = z.row(i);
        let d_pos = sphere_distance_raw(zi, w.row(label), radius);
        let (nearest, d_near) = nearest_negative_in(zi, label, &w, radius);
        let mut term = T::zero();
        let mut active = Vec::new();
        match negatives {
            Negatives::Nearest => {
                let h = d_pos - d_near + cfg.delta;
                if h > T::zero() {
                    term = h;
                    active.push(nearest);
                }
            }
            Negatives::All => {
                for j in (0..bank.class_count()).filter(|&j| j != label) {
                    let h = d_pos - sphere_distance_raw(zi, w.row(j), radius) + cfg.delta;
                    if h > T::zero() {
                        term = term + h;
                        active.push(j);
                    }
                }
            }
        }
        per_sample.push(term);
        touched.push(if active.is_empty() {
            None
        } else {
            Some(nearest)
        });

        if with_grad {
            // d(z, W) = 2r^2 - 2 z.W, so each active pair contributes
            // 2(W_j - W_y) to z, 2z to W_j and -2z to W_y.
            for &j in &active {
                let g = acc.feature(i);
                axpy(step, w.row(j), g);
                axpy(-step, w.row(label), g);
                if cfg.negative_proxy_grad {
                    axpy(step, zi, acc.proxy(j));
                }
                axpy(-step, zi, acc.proxy(label));
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
        touched_negatives: touched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use proptest::prelude::*;

    fn bank(rows: &[[f64; 2]], r: f64) -> ProxyBank<f64> {
        ProxyBank::new(Matrix::from_rows(rows).unwrap(), r).unwrap()
    }

    fn batch(rows: &[[f64; 2]], labels: &[usize]) -> LabeledBatch<f64> {
        LabeledBatch::new(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    fn cfg(delta: f64) -> MarginConfig<f64> {
        MarginConfig::for_radius(1.0).with_delta(delta)
    }

    #[test]
    fn npt_forward_examples() {
        let w = bank(&[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let satisfied = npt_forward(&batch(&[[1.0, 0.0]], &[0]), &w, &cfg(0.5)).unwrap();
        assert_eq!(satisfied.loss, 0.0);
        assert_eq!(satisfied.touched_negatives, vec![None]);

        let violated = npt_forward(&batch(&[[0.0, 1.0]], &[0]), &w, &cfg(0.5)).unwrap();
        assert_eq!(violated.loss, 2.5);
        assert_eq!(violated.touched_negatives, vec![Some(1)]);

        // z on the bisector: equal distances to both proxies
        let tie = npt_forward(&batch(&[[1.0, 1.0]], &[0]), &w, &cfg(0.0)).unwrap();
        assert!(tie.loss.abs() < 1e-15);
    }

    #[test]
    fn matches_the_unit_vector_form() {
        let r = 1.7;
        let w = bank(&[[1.0, 0.2], [-0.3, 1.0], [0.4, -1.0]], r);
        let b = batch(&[[0.2, 1.0], [1.0, -0.1]], &[0, 2]);
        let res = npt_forward(&b, &w, &MarginConfig::for_radius(r)).unwrap();
        let wn = w.normalized().unwrap();
        let mut expect = 0.0;
        for (i, &y) in b.labels.iter().enumerate() {
            let z = crate::geometry::project_raw(b.features.row(i), 1.0).unwrap();
            let cos = |j: usize| crate::scalar::dot(&z, wn.row(j)) / r;
            let best = (0..3).filter(|&j| j != y).map(cos).fold(f64::MIN, f64::max);
            // delta = r^2/2 puts 1/4 inside the unit-vector hinge
            expect += 2.0 * r * r * (best - cos(y) + 0.25).max(0.0);
        }
        assert!(
            (res.loss - expect / 2.0).abs() < 1e-12,
            "{} vs {}",
            res.loss,
            expect / 2.0
        );
    }

    #[test]
    fn proxy_triplet_examples() {
        let w = bank(&[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let b = batch(&[[0.0, 1.0]], &[0]);
        assert_eq!(proxy_triplet_forward(&b, &w, &cfg(0.5)).unwrap().loss, 2.5);
        assert_eq!(
            proxy_triplet_forward(&b, &w, &cfg(0.5)).unwrap().loss,
            npt_forward(&b, &w, &cfg(0.5)).unwrap().loss
        );
        let easy = batch(&[[1.0, 0.0]], &[0]);
        assert_eq!(
            proxy_triplet_forward(&easy, &w, &cfg(0.5)).unwrap().loss,
            0.0
        );
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let w = bank(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.1]], 1.0);
        let b = batch(&[[1.0, 0.05], [0.0, 1.0]], &[0, 0]);
        for res in [
            npt_backward(&b, &w, &cfg(0.5)).unwrap(),
            proxy_triplet_backward(&b, &w, &cfg(0.5)).unwrap(),
        ] {
            assert_eq!(res.per_sample[0], 0.0);
            assert!(res.grad_features.row(0).iter().all(|&g| g == 0.0));
            assert!(res.grad_features.row(1).iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn duplicated_sample_keeps_the_gradient() {
        let w = bank(&[[1.0, 0.3], [0.2, 1.0], [-1.0, 0.4]], 1.0);
        let single = batch(&[[0.3, 1.0]], &[0]);
        let double = batch(&[[0.3, 1.0], [0.3, 1.0]], &[0, 0]);
        for kind in [LossKind::Npt, LossKind::ProxyTriplet] {
            let one = crate::losses::loss_dispatch(kind, &single, &w, &cfg(0.5)).unwrap();
            let two = crate::losses::loss_dispatch(kind, &double, &w, &cfg(0.5)).unwrap();
            assert_eq!(one.loss, two.loss);
            for (j, g) in &one.grad_proxies {
                for (a, b) in g.iter().zip(&two.grad_proxies[j]) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
            // each copy carries half of the shared feature gradient
            for (a, b) in one
                .grad_features
                .row(0)
                .iter()
                .zip(two.grad_features.row(0))
            {
                assert!((a - 2.0 * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn detached_negatives_receive_no_gradient() {
        let w = bank(&[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let b = batch(&[[0.0, 1.0]], &[0]);
        let mut c = cfg(0.5);
        c.negative_proxy_grad = false;
        let res = npt_backward(&b, &w, &c).unwrap();
        assert!(res.grad_proxies.contains_key(&0));
        assert!(!res.grad_proxies.contains_key(&1));
    }

    type Instance = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, f64);

    fn instance() -> impl Strategy<Value = Instance> {
        (2usize..6, 2usize..5, 1usize..6).prop_flat_map(|(c, n, b)| {
            let row = prop::collection::vec(-2.0f64..2.0, n)
                .prop_filter("nonzero", |v| crate::scalar::norm(v) > 1e-3);
            (
                prop::collection::vec(row.clone(), c),
                prop::collection::vec(row, b),
                prop::collection::vec(0..c, b),
                0.0f64..2.0,
            )
        })
    }

    proptest! {
        #[test]
        fn npt_is_the_worst_pairwise_hinge((w, f, y, delta) in instance()) {
            let bank = ProxyBank::new(Matrix::from_rows(&w).unwrap(), 1.0).unwrap();
            let b = LabeledBatch::new(Matrix::from_rows(&f).unwrap(), y.clone()).unwrap();
            let c = cfg(delta);
            let npt = npt_forward(&b, &bank, &c).unwrap();
            let pt = proxy_triplet_forward(&b, &bank, &c).unwrap();
            let wn = bank.normalized().unwrap();
            for (i, &label) in y.iter().enumerate() {
                let z = crate::geometry::project_raw(&f[i], 1.0).unwrap();
                let dp = sphere_distance_raw(&z, wn.row(label), 1.0);
                let worst = (0..w.len()).filter(|&j| j != label)
                    .map(|j| (dp - sphere_distance_raw(&z, wn.row(j), 1.0) + delta).max(0.0))
                    .fold(0.0, f64::max);
                prop_assert!((npt.per_sample[i] - worst).abs() <= 1e-12);
                prop_assert!(npt.per_sample[i] <= pt.per_sample[i] + 1e-12);
                prop_assert!(npt.per_sample[i] >= 0.0);
                if let Some(j) = npt.touched_negatives[i] {
                    prop_assert_ne!(j, label);
                }
            }
        }

        #[test]
        fn loss_scales_with_radius_squared((w, f, y, delta) in instance(), r in 0.2f64..3.0) {
            let unit_bank = ProxyBank::new(Matrix::from_rows(&w).unwrap(), 1.0).unwrap();
            let big_bank = ProxyBank::new(Matrix::from_rows(&w).unwrap(), r).unwrap();
            let b = LabeledBatch::new(Matrix::from_rows(&f).unwrap(), y).unwrap();
            let l1 = npt_forward(&b, &unit_bank, &cfg(delta)).unwrap().loss;
            let lr = npt_forward(&b, &big_bank, &MarginConfig::for_radius(r).with_delta(delta * r * r))
                .unwrap().loss;
            prop_assert!((lr - r * r * l1).abs() <= 1e-9 * (r * r * l1).abs().max(1e-6));
        }

        #[test]
        fn low_loss_means_correct_argmin((w, f, y, delta) in instance()) {
            let bank = ProxyBank::new(Matrix::from_rows(&w).unwrap(), 1.0).unwrap();
            let b = LabeledBatch::new(Matrix::from_rows(&f).unwrap(), y.clone()).unwrap();
            let res = npt_backward(&b, &bank, &cfg(delta)).unwrap();
            prop_assert!(res.all_finite());
            let wn = bank.normalized().unwrap();
            for (i, &label) in y.iter().enumerate() {
                if res.per_sample[i] < delta {
                    let z = crate::geometry::project_raw(&f[i], 1.0).unwrap();
                    let dp = sphere_distance_raw(&z, wn.row(label), 1.0);
                    for j in (0..w.len()).filter(|&j| j != label) {
                        prop_assert!(dp < sphere_distance_raw(&z, wn.row(j), 1.0));
                    }
                }
            }
        }
    }
}
