//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for embeddings, parameters and losses.
///
/// Implemented for `f32` and `f64`. Gradient verification is only meaningful
/// in `f64`, which is what the crate-level aliases use.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `out += alpha * x`
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// Pulls a gradient taken with respect to `r * v / |v|` back onto `v`:
/// `(r / |v|) (g - v (v.g) / |v|^2)`.
pub(crate) fn normalization_vjp<T: Scalar>(raw: &[T], radius: T, grad: &[T]) -> Vec<T> {
    let n2 = dot(raw, raw);
    let n = n2.sqrt();
    let proj = dot(raw, grad) / n2;
    let scale = radius / n;
    raw.iter()
        .zip(grad)
        .map(|(&v, &g)| scale * (g - v * proj))
        .collect()
}
