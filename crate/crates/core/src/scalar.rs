//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.
///
/// Implemented by `f32` and `f64`. The pipeline aliases in the crate root pin
/// `f64`; `f32` remains available for experiments where gradient-check
/// tolerances do not apply.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for literals and RNG draws.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("scalar conversion from f64")
    }

    /// Conversion to `f64`, for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar conversion to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
