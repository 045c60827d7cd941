use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors: `f32` or `f64`.
///
/// Storage and kernels run in `Self`; reductions (sums, norms, losses)
/// accumulate through [`Scalar::to_f64c`] regardless of the storage width.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Width in bytes, used by the checkpoint size estimates.
    const BYTES: usize;

    fn erf(self) -> Self;

    #[inline]
    fn from_f64c(v: f64) -> Self {
        // Infallible for both float widths.
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
