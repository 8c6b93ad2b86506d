//! Vectors on a radius-`r` hypersphere and the distances between them.
//!
//! With both points at norm `r`, squared Euclidean distance reduces to
//! `2r^2 - 2 u.v`, an affine function of cosine similarity, so all three
//! measures rank neighbours identically.

use crate::error::{NptError, Result};
use crate::scalar::{dot, norm, Scalar};

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;
/// Allowed relative deviation of a stored vector's norm from its radius.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct HypersphereVector<T> {
    components: Vec<T>,
    radius: T,
}

impl<T: Scalar> HypersphereVector<T> {
    /// Wraps components that already lie on the sphere, checking the norm.
    pub fn new(components: Vec<T>, radius: T) -> Result<Self> {
        if components.len() < 2 {
            return Err(NptError::InvalidArgument(format!(
                "hypersphere dimension must be at least 2, got {}",
                components.len()
            )));
        }
        if !(radius > T::zero()) {
            return Err(NptError::InvalidArgument(format!(
                "radius must be positive, got {radius}"
            )));
        }
        let n = norm(&components);
        if (n - radius).abs() > T::lit(NORM_TOLERANCE) * radius {
            return Err(NptError::InvalidArgument(format!(
                "norm {n} differs from radius {radius}"
            )));
        }
        Ok(Self { components, radius })
    }

    pub fn components(&self) -> &[T] {
        &self.components
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn into_components(self) -> Vec<T> {
        self.components
    }

    /// Same direction at a different radius.
    pub fn rescaled(&self, radius: T) -> Result<Self> {
        normalize_to_sphere(&self.components, radius)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(NptError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let tol = T::lit(NORM_TOLERANCE) * self.radius.max(other.radius);
        if (self.radius - other.radius).abs() > tol {
            return Err(NptError::RadiusMismatch {
                left: self.radius.as_f64(),
                right: other.radius.as_f64(),
            });
        }
        Ok(())
    }
}

/// Projects `v` onto the sphere of radius `radius`: `r v / |v|`.
pub fn normalize_to_sphere<T: Scalar>(v: &[T], radius: T) -> Result<HypersphereVector<T>> {
    let n = norm(v);
    if !(n > T::lit(MIN_NORM)) {
        return Err(NptError::ZeroVector { norm: n.as_f64() });
    }
    let scale = radius / n;
    HypersphereVector::new(v.iter().map(|&x| x * scale).collect(), radius)
}

/// Squared Euclidean distance `2r^2 - 2 u.v`, clamped into `[0, 4r^2]`.
pub fn sphere_distance<T: Scalar>(u: &HypersphereVector<T>, v: &HypersphereVector<T>) -> Result<T> {
    u.check_compatible(v)?;
    Ok(sphere_distance_raw(&u.components, &v.components, u.radius))
}

/// Euclidean distance, the square root of [`sphere_distance`].
pub fn euclidean_distance<T: Scalar>(
    u: &HypersphereVector<T>,
    v: &HypersphereVector<T>,
) -> Result<T> {
    sphere_distance(u, v).map(|d| d.sqrt())
}

/// Cosine similarity `u.v / r^2`, clamped into `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(
    u: &HypersphereVector<T>,
    v: &HypersphereVector<T>,
) -> Result<T> {
    if u.dim() != v.dim() {
        return Err(NptError::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let c = dot(&u.components, &v.components) / (u.radius * v.radius);
    Ok(c.max(-T::one()).min(T::one()))
}

/// [`sphere_distance`] on plain slices already known to lie on the sphere.
pub(crate) fn sphere_distance_raw<T: Scalar>(u: &[T], v: &[T], radius: T) -> T {
    let two = T::lit(2.0);
    let r2 = radius * radius;
    let d = two * r2 - two * dot(u, v);
    d.max(T::zero()).min(T::lit(4.0) * r2)
}

/// `r v / |v|` on slices, without the wrapper type.
pub(crate) fn project_raw<T: Scalar>(v: &[T], radius: T) -> Result<Vec<T>> {
    let n = norm(v);
    if !(n > T::lit(MIN_NORM)) {
        return Err(NptError::ZeroVector { norm: n.as_f64() });
    }
    let scale = radius / n;
    Ok(v.iter().map(|&x| x * scale).collect())
}
