//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, Signed, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Wave-optics work defaults to `f64` so that finite-difference gradient
/// checks stay meaningful; `f32` trades accuracy for speed.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Signed
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sum in `f64` regardless of the storage type.
pub(crate) fn sum_f64<T: Real>(values: impl IntoIterator<Item = T>) -> f64 {
    values.into_iter().map(|v| v.to_f64_lossy()).sum()
}
