//! Proxy-based and in-batch metric losses on the hypersphere.
//!
//! Every loss reads raw (unnormalized) features and raw proxy rows, projects
//! them onto the radius-`r` sphere, and returns gradients with respect to the
//! raw values. Keeping proxies raw and normalizing on read means an optimizer
//! step never has to re-project them.

mod proxy;
mod softmax;
mod triplet;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NptError, Result};
use crate::geometry::{project_raw, sphere_distance_raw, HypersphereVector, MIN_NORM};
use crate::matrix::Matrix;
use crate::scalar::{norm, normalization_vjp, Scalar};

pub use proxy::{npt_backward, npt_forward, proxy_triplet_backward, proxy_triplet_forward};
pub use softmax::{
    margin_softmax_backward, margin_softmax_forward, normalized_softmax_backward,
    normalized_softmax_forward,
};
pub use triplet::{triplet_backward_inbatch, triplet_forward_inbatch};

/// One learnable proxy row per class, stored raw.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank<T> {
    raw: Matrix<T>,
    radius: T,
}

impl<T: Scalar> ProxyBank<T> {
    pub fn new(raw: Matrix<T>, radius: T) -> Result<Self> {
        if raw.rows() < 2 {
            return Err(NptError::SingleClass(raw.rows()));
        }
        if raw.cols() < 2 {
            return Err(NptError::InvalidArgument(format!(
                "embedding dimension must be at least 2, got {}",
                raw.cols()
            )));
        }
        if !(radius > T::zero()) {
            return Err(NptError::InvalidArgument(format!(
                "radius must be positive, got {radius}"
            )));
        }
        for row in raw.iter_rows() {
            let n = norm(row);
            if !(n > T::lit(MIN_NORM)) {
                return Err(NptError::ZeroVector { norm: n.as_f64() });
            }
        }
        Ok(Self { raw, radius })
    }

    /// Rows drawn from a standard normal and scaled to norm `radius`.
    pub fn random<R: Rng + ?Sized>(
        classes: usize,
        dim: usize,
        radius: T,
        rng: &mut R,
    ) -> Result<Self> {
        let mut raw = Matrix::zeros(classes, dim);
        for i in 0..classes {
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&row);
            for (dst, v) in raw.row_mut(i).iter_mut().zip(row) {
                *dst = T::lit(v / n) * radius;
            }
        }
        Self::new(raw, radius)
    }

    pub fn class_count(&self) -> usize {
        self.raw.rows()
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn raw(&self) -> &Matrix<T> {
        &self.raw
    }

    /// Mutable raw weights, for the optimizer.
    pub fn raw_mut(&mut self) -> &mut Matrix<T> {
        &mut self.raw
    }

    /// All rows projected to the sphere.
    pub fn normalized(&self) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(self.class_count(), self.dim());
        for i in 0..self.class_count() {
            out.row_mut(i)
                .copy_from_slice(&project_raw(self.raw.row(i), self.radius)?);
        }
        Ok(out)
    }

    pub fn proxy(&self, class: usize) -> Result<HypersphereVector<T>> {
        crate::geometry::normalize_to_sphere(self.raw.row(class), self.radius)
    }

    /// Smallest squared distance between two distinct normalized proxies.
    pub fn min_pairwise_distance(&self) -> Result<T> {
        let w = self.normalized()?;
        let mut best = T::infinity();
        for i in 0..w.rows() {
            for j in (i + 1)..w.rows() {
                best = best.min(sphere_distance_raw(w.row(i), w.row(j), self.radius));
            }
        }
        Ok(best)
    }
}

/// Raw network outputs with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(NptError::InvalidArgument("empty batch".into()));
        }
        if features.rows() != labels.len() {
            return Err(NptError::DimensionMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn check_against(&self, bank: &ProxyBank<T>) -> Result<()> {
        if self.features.cols() != bank.dim() {
            return Err(NptError::DimensionMismatch {
                expected: bank.dim(),
                got: self.features.cols(),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= bank.class_count()) {
            return Err(NptError::LabelOutOfRange {
                label,
                classes: bank.class_count(),
            });
        }
        Ok(())
    }

    /// Features projected to the sphere.
    pub(crate) fn normalized(&self, radius: T) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(self.features.rows(), self.features.cols());
        for i in 0..self.features.rows() {
            out.row_mut(i)
                .copy_from_slice(&project_raw(self.features.row(i), radius)?);
        }
        Ok(out)
    }
}

/// Batch-mean loss plus gradients with respect to raw features and raw proxies.
///
/// Forward-only calls leave the gradients at zero and `grad_proxies` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub loss: T,
    /// Per-sample terms before averaging; zero for skipped triplet anchors.
    pub per_sample: Vec<T>,
    pub grad_features: Matrix<T>,
    pub grad_proxies: BTreeMap<usize, Vec<T>>,
    /// Nearest negative proxy of each sample whose hinge is active.
    pub touched_negatives: Vec<Option<usize>>,
}

impl<T: Scalar> LossResult<T> {
    pub fn all_finite(&self) -> bool {
        self.loss.is_finite()
            && self.per_sample.iter().all(|v| v.is_finite())
            && self.grad_features.is_finite()
            && self.grad_proxies.values().flatten().all(|v| v.is_finite())
    }

    /// Proxy gradients as a dense `C x n` matrix (untouched rows zero).
    pub fn dense_proxy_grad(&self, classes: usize, dim: usize) -> Matrix<T> {
        let mut out = Matrix::zeros(classes, dim);
        for (&i, g) in &self.grad_proxies {
            out.row_mut(i).copy_from_slice(g);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig<T> {
    /// Hinge margin for the triplet-style losses.
    pub delta: T,
    /// Logit scale for the softmax baselines.
    pub scale: T,
    /// Additive angular margin (radians) for the margin-softmax baseline.
    pub angular_margin: T,
    /// When false the negative proxies of the hinge losses get no gradient.
    pub negative_proxy_grad: bool,
}

impl<T: Scalar> MarginConfig<T> {
    /// `delta = r^2 / 2`, `s = 16`, `m = 0.5`.
    pub fn for_radius(radius: T) -> Self {
        Self {
            delta: radius * radius / T::lit(2.0),
            scale: T::lit(16.0),
            angular_margin: T::lit(0.5),
            negative_proxy_grad: true,
        }
    }

    pub fn with_delta(mut self, delta: T) -> Self {
        self.delta = delta;
        self
    }

    pub fn validate(&self, radius: T) -> Result<()> {
        if !(self.delta >= T::zero()) || self.delta > T::lit(4.0) * radius * radius {
            return Err(NptError::InvalidArgument(format!(
                "margin {} outside [0, 4r^2]",
                self.delta
            )));
        }
        if !(self.scale > T::zero()) {
            return Err(NptError::InvalidArgument(format!(
                "softmax scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.angular_margin >= T::zero()) {
            return Err(NptError::InvalidArgument(format!(
                "angular margin must be non-negative, got {}",
                self.angular_margin
            )));
        }
        Ok(())
    }
}

impl Default for MarginConfig<f64> {
    fn default() -> Self {
        Self::for_radius(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Npt,
    ProxyTriplet,
    Triplet,
    NormSoftmax,
    MarginSoftmax,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Npt,
        LossKind::ProxyTriplet,
        LossKind::Triplet,
        LossKind::NormSoftmax,
        LossKind::MarginSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Npt => "npt",
            LossKind::ProxyTriplet => "proxy_triplet",
            LossKind::Triplet => "triplet",
            LossKind::NormSoftmax => "norm_softmax",
            LossKind::MarginSoftmax => "margin_softmax",
        }
    }

    /// Whether the loss reads proxies at all.
    pub fn uses_proxies(self) -> bool {
        !matches!(self, LossKind::Triplet)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = NptError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NptError::Parse(format!("unknown loss '{s}'")))
    }
}

/// Nearest proxy of a class other than `label`, with its squared distance.
/// Ties go to the smallest proxy index.
pub fn nearest_negative_proxy<T: Scalar>(
    z: &HypersphereVector<T>,
    label: usize,
    bank: &ProxyBank<T>,
) -> Result<(usize, T)> {
    if bank.class_count() < 2 {
        return Err(NptError::SingleClass(bank.class_count()));
    }
    if label >= bank.class_count() {
        return Err(NptError::LabelOutOfRange {
            label,
            classes: bank.class_count(),
        });
    }
    if z.dim() != bank.dim() {
        return Err(NptError::DimensionMismatch {
            expected: bank.dim(),
            got: z.dim(),
        });
    }
    let w = bank.normalized()?;
    Ok(nearest_negative_in(
        z.components(),
        label,
        &w,
        bank.radius(),
    ))
}

/// Ranked negatives on a pre-normalized proxy matrix: returns the nearest.
pub(crate) fn nearest_negative_in<T: Scalar>(
    z: &[T],
    label: usize,
    proxies: &Matrix<T>,
    radius: T,
) -> (usize, T) {
    let mut best = (usize::MAX, T::infinity());
    for (j, w) in proxies.iter_rows().enumerate() {
        if j == label {
            continue;
        }
        let d = sphere_distance_raw(z, w, radius);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest and second-nearest negatives, ties to the smallest index.
pub(crate) fn two_nearest_negatives<T: Scalar>(
    z: &[T],
    label: usize,
    proxies: &Matrix<T>,
    radius: T,
) -> ((usize, T), (usize, T)) {
    let mut first = (usize::MAX, T::infinity());
    let mut second = (usize::MAX, T::infinity());
    for (j, w) in proxies.iter_rows().enumerate() {
        if j == label {
            continue;
        }
        let d = sphere_distance_raw(z, w, radius);
        if d < first.1 {
            second = first;
            first = (j, d);
        } else if d < second.1 {
            second = (j, d);
        }
    }
    (first, second)
}

/// Forward and backward for any loss kind. The result carries gradients.
pub fn loss_dispatch<T: Scalar>(
    kind: LossKind,
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    match kind {
        LossKind::Npt => npt_backward(batch, bank, cfg),
        LossKind::ProxyTriplet => proxy_triplet_backward(batch, bank, cfg),
        LossKind::Triplet => triplet_backward_inbatch(batch, bank.radius(), cfg),
        LossKind::NormSoftmax => normalized_softmax_backward(batch, bank, cfg),
        LossKind::MarginSoftmax => margin_softmax_backward(batch, bank, cfg),
    }
}

/// Loss value only, for any kind.
pub fn loss_forward<T: Scalar>(
    kind: LossKind,
    batch: &LabeledBatch<T>,
    bank: &ProxyBank<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossResult<T>> {
    match kind {
        LossKind::Npt => npt_forward(batch, bank, cfg),
        LossKind::ProxyTriplet => proxy_triplet_forward(batch, bank, cfg),
        LossKind::Triplet => triplet_forward_inbatch(batch, bank.radius(), cfg),
        LossKind::NormSoftmax => normalized_softmax_forward(batch, bank, cfg),
        LossKind::MarginSoftmax => margin_softmax_forward(batch, bank, cfg),
    }
}

/// Accumulates sphere-space gradients and pulls them back to raw values.
pub(crate) struct GradAccumulator<T> {
    features: Matrix<T>,
    proxies: BTreeMap<usize, Vec<T>>,
    dim: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub(crate) fn new(batch: usize, dim: usize) -> Self {
        Self {
            features: Matrix::zeros(batch, dim),
            proxies: BTreeMap::new(),
            dim,
        }
    }

    pub(crate) fn feature(&mut self, i: usize) -> &mut [T] {
        self.features.row_mut(i)
    }

    pub(crate) fn proxy(&mut self, j: usize) -> &mut [T] {
        let dim = self.dim;
        self.proxies
            .entry(j)
            .or_insert_with(|| vec![T::zero(); dim])
    }

    pub(crate) fn finish(
        self,
        raw_features: &Matrix<T>,
        raw_proxies: Option<&Matrix<T>>,
        radius: T,
    ) -> (Matrix<T>, BTreeMap<usize, Vec<T>>) {
        let mut gf = Matrix::zeros(self.features.rows(), self.dim);
        for i in 0..self.features.rows() {
            let g = normalization_vjp(raw_features.row(i), radius, self.features.row(i));
            gf.row_mut(i).copy_from_slice(&g);
        }
        let gp = match raw_proxies {
            Some(raw) => self
                .proxies
                .into_iter()
                .map(|(j, g)| (j, normalization_vjp(raw.row(j), radius, &g)))
                .collect(),
            None => BTreeMap::new(),
        };
        (gf, gp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[[f64; 2]]) -> ProxyBank<f64> {
        ProxyBank::new(Matrix::from_rows(rows).unwrap(), 1.0).unwrap()
    }

    fn unit(v: &[f64]) -> HypersphereVector<f64> {
        crate::geometry::normalize_to_sphere(v, 1.0).unwrap()
    }

    #[test]
    fn nearest_negative_examples() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        let (j, d) = nearest_negative_proxy(&unit(&[0.6, 0.8]), 0, &b).unwrap();
        assert_eq!(j, 1);
        assert!((d - 0.4).abs() < 1e-15);

        let two = bank(&[[1.0, 0.0], [0.3, 0.7]]);
        for z in [[1.0, 0.0], [0.0, 1.0], [-1.0, -0.2]] {
            assert_eq!(nearest_negative_proxy(&unit(&z), 0, &two).unwrap().0, 1);
        }
    }

    #[test]
    fn nearest_negative_tie_goes_to_smallest_index() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let swapped = bank(&[[1.0, 0.0], [0.0, -1.0], [0.0, 1.0]]);
        let z = unit(&[1.0, 0.0]);
        assert_eq!(nearest_negative_proxy(&z, 0, &b).unwrap().0, 1);
        assert_eq!(nearest_negative_proxy(&z, 0, &swapped).unwrap().0, 1);
    }

    #[test]
    fn bank_requires_two_classes_and_nonzero_rows() {
        let one = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            ProxyBank::new(one, 1.0),
            Err(NptError::SingleClass(1))
        ));
        let zero = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            ProxyBank::new(zero, 1.0),
            Err(NptError::ZeroVector { .. })
        ));
    }

    #[test]
    fn bank_reads_normalized_rows() {
        let b = ProxyBank::new(
            Matrix::from_rows(&[[3.0f64, 4.0], [0.0, -2.0]]).unwrap(),
            2.0,
        )
        .unwrap();
        let w = b.normalized().unwrap();
        assert!((w[(0, 0)] - 1.2).abs() < 1e-15);
        assert!((w[(0, 1)] - 1.6).abs() < 1e-15);
        assert_eq!(w.row(1), &[0.0, -2.0]);
    }

    #[test]
    fn orthogonal_proxies_are_two_apart() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(b.min_pairwise_distance().unwrap(), 2.0);
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("arcface".parse::<LossKind>().is_err());
    }

    #[test]
    fn margin_config_rejects_oversized_delta() {
        let cfg = MarginConfig::for_radius(1.0).with_delta(4.5);
        assert!(cfg.validate(1.0).is_err());
        assert!(MarginConfig::for_radius(1.0).validate(1.0).is_ok());
    }
}
