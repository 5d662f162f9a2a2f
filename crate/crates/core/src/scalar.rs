//! Floating-point abstraction shared by the vector and statistics kernels.
//!
//! Embedding math and the resampling statistics are written once against
//! [`Scalar`] and instantiated for `f32` (embedding storage) and `f64`
//! (reported statistics). Count-derived rates that must be exact use
//! [`Rate`], a reduced rational.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A real scalar usable by the embedding and statistics code.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Machine epsilon-scaled tolerance used when checking unit norms.
    fn norm_tolerance() -> Self;

    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize fits in a float")
    }

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn norm_tolerance() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    fn norm_tolerance() -> Self {
        1e-6
    }
}

/// An exact count ratio, e.g. `tp / (tp + fn)`.
///
/// Kept rational so that identities such as `agreement = (tp + tn) / n`
/// can be checked without rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(Ratio<u64>);

impl Rate {
    /// `None` when the denominator is zero.
    pub fn new(numerator: u64, denominator: u64) -> Option<Self> {
        if denominator == 0 {
            None
        } else {
            Some(Self(Ratio::new(numerator, denominator)))
        }
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    /// Complement `1 - r`; only meaningful for rates in `[0, 1]`.
    pub fn complement(&self) -> Self {
        Self(Ratio::from_integer(1) - self.0)
    }

    pub fn value<F: Scalar>(&self) -> F {
        F::from_f64_lossy(self.numer() as f64) / F::from_f64_lossy(self.denom() as f64)
    }

    pub fn as_f64(&self) -> f64 {
        self.value::<f64>()
    }
}

impl Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

/// Dot product of two equal-length slices.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn l2_norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// Normalizes in place; returns `false` (leaving the input untouched) for a zero vector.
pub fn normalize_in_place<F: Scalar>(v: &mut [F]) -> bool {
    let norm = l2_norm(v);
    if norm == F::zero() || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = *x / norm;
    }
    true
}

pub fn mean<F: Scalar>(xs: &[F]) -> F {
    if xs.is_empty() {
        return F::zero();
    }
    xs.iter().copied().sum::<F>() / F::from_count(xs.len())
}

/// Sample variance with `n - 1` denominator.
pub fn sample_variance<F: Scalar>(xs: &[F]) -> F {
    if xs.len() < 2 {
        return F::zero();
    }
    let m = mean(xs);
    let ss: F = xs.iter().map(|x| (*x - m) * (*x - m)).sum();
    ss / F::from_count(xs.len() - 1)
}
