//! Scalar abstraction: the whole stack is generic over the float type.
//!
//! Training runs on `f32`; gradient-verification graphs run on `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable as tensor element.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("constant out of range")
    }

    /// Widen to `f64` (exact for f32/f64).
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_c(self) -> f64 {
        self
    }
}
