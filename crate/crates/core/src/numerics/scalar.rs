use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors, gradients and model parameters.
///
/// Implemented for `f32` and `f64`. Everything that does arithmetic in this
/// crate is generic over it; the crate root exposes `f64` aliases.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Values out of range saturate to infinity.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Name written into checkpoint headers.
    const NAME: &'static str;
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    const NAME: &'static str = "f64";
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    const NAME: &'static str = "f32";
}
