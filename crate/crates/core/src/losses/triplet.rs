//! Standard triplet loss with hard positive/negative mining inside the batch.

use crate::error::{NptError, Result};
use crate::geometry::sphere_distance_raw;
use crate::matrix::Matrix;
use crate::scalar::{axpy, Scalar};

use super::{GradAccumulator, LabeledBatch, LossResult, MarginConfig};

/// For each anchor: farthest same-label sample against nearest other-label
/// sample. Anchors lacking either are skipped; the mean runs over the rest.
pub fn triplet_forward_inbatch<T: Scalar>(
    batch: &LabeledBatch<T>,
    radius: T,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    triplet(batch, radius, cfg, false)
}

pub fn triplet_backward_inbatch<T: Scalar>(
    batch: &LabeledBatch<T>,
    radius: T,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    triplet(batch, radius, cfg, true)
}

/// Hard positive and hard negative batch indices for `anchor`, ties to the
/// smallest index.
pub(crate) fn mine<T: Scalar>(
    z: &Matrix<T>,
    labels: &[usize],
    anchor: usize,
    radius: T,
) -> Option<(usize, T, usize, T)> {
    let a = z.row(anchor);
    let mut pos: Option<(usize, T)> = None;
    let mut neg: Option<(usize, T)> = None;
    for (j, &label) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        let d = sphere_distance_raw(a, z.row(j), radius);
        if label == labels[anchor] {
            if pos.is_none_or(|(_, best)| d > best) {
                pos = Some((j, d));
            }
        } else if neg.is_none_or(|(_, best)| d < best) {
            neg = Some((j, d));
        }
    }
    match (pos, neg) {
        (Some((p, dp)), Some((n, dn))) => Some((p, dp, n, dn)),
        _ => None,
    }
}

fn triplet<T: Scalar>(
    batch: &LabeledBatch<T>,
    radius: T,
    cfg: &MarginConfig<T>,
    with_grad: bool,
) -> Result<LossResult<T>> {
    cfg.validate(radius)?;
    let z = batch.normalized(radius)?;
    let b = batch.len();
    let mined: Vec<_> = (0..b).map(|a| mine(&z, &batch.labels, a, radius)).collect();
    let valid = mined.iter().filter(|m| m.is_some()).count();
    if valid == 0 {
        return Err(NptError::NoValidTriplet);
    }
    let inv_v = T::one() / T::lit(valid as f64);
    let step = T::lit(2.0) * inv_v;

    let mut per_sample = vec![T::zero(); b];
    let mut acc = GradAccumulator::new(b, batch.features.cols());
    for (a, m) in mined.iter().enumerate() {
        let Some((p, dp, n, dn)) = *m else { continue };
        let h = dp - dn + cfg.delta;
        if h <= T::zero() {
            continue;
        }
        per_sample[a] = h;
        if with_grad {
            // d(a,p) - d(a,n) = 2 a.(n - p) up to constants
            let (za, zp, zn) = (z.row(a).to_vec(), z.row(p).to_vec(), z.row(n).to_vec());
            let ga = acc.feature(a);
            axpy(step, &zn, ga);
            axpy(-step, &zp, ga);
            axpy(-step, &za, acc.feature(p));
            axpy(step, &za, acc.feature(n));
        }
    }

    let loss = per_sample.iter().copied().sum::<T>() * inv_v;
    let grad_features = if with_grad {
        acc.finish(&batch.features, None, radius).0
    } else {
        Matrix::zeros(b, batch.features.cols())
    };
    Ok(LossResult {
        loss,
        per_sample,
        grad_features,
        grad_proxies: Default::default(),
        touched_negatives: vec![None; b],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[[f64; 2]], labels: &[usize]) -> LabeledBatch<f64> {
        LabeledBatch::new(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    fn cfg() -> MarginConfig<f64> {
        MarginConfig::for_radius(1.0)
    }

    #[test]
    fn hand_batch() {
        // anchor (1,0) with positive (0,1) and a negative sitting on the anchor
        let b = batch(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], &[0, 0, 1]);
        let res = triplet_forward_inbatch(&b, 1.0, &cfg()).unwrap();
        assert_eq!(res.per_sample[0], 2.5);
        // anchor 1: positive 0 at distance 2, negative 2 at distance 2
        assert_eq!(res.per_sample[1], 0.5);
        // anchor 2 has no positive and is skipped
        assert_eq!(res.per_sample[2], 0.0);
        assert_eq!(res.loss, 1.5);
    }

    #[test]
    fn well_separated_batch_is_zero() {
        let b = batch(
            &[[1.0, 0.0], [1.0, 0.1], [-1.0, 0.0], [-1.0, -0.1]],
            &[0, 0, 1, 1],
        );
        let res = triplet_backward_inbatch(&b, 1.0, &cfg()).unwrap();
        assert_eq!(res.loss, 0.0);
        assert!(res.grad_features.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn degenerate_batches_have_no_triplet() {
        let single_label = batch(&[[1.0, 0.0], [0.0, 1.0]], &[0, 0]);
        assert!(matches!(
            triplet_forward_inbatch(&single_label, 1.0, &cfg()),
            Err(NptError::NoValidTriplet)
        ));
        let all_distinct = batch(&[[1.0, 0.0], [0.0, 1.0]], &[0, 1]);
        assert!(matches!(
            triplet_forward_inbatch(&all_distinct, 1.0, &cfg()),
            Err(NptError::NoValidTriplet)
        ));
    }
}
