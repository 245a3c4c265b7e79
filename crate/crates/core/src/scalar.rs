//! Scalar abstraction for the numeric kernels.
//!
//! Everything numeric in this crate is written against [`Scalar`] so the same
//! kernels run at f32 or f64. The shipped pipeline and the file formats are
//! f64 (see the aliases at the crate root); f32 exists for quick experiments.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};

/// Floating-point element type of tensors and kernels.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert an f64 constant into this scalar type.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 constant")
    }

    /// Widen to f64 (exact for f32 and f64).
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar widens to f64")
    }

    /// Error function, used by the exact Gaussian-CDF GELU.
    fn erf(self) -> Self {
        Self::from_f64_lossy(libm::erf(self.to_f64_lossy()))
    }

    /// Standard normal CDF Φ(x).
    fn gauss_cdf(self) -> Self {
        let half = Self::from_f64_lossy(0.5);
        half * (Self::one() + (self / Self::SQRT_2()).erf())
    }

    /// Standard normal density φ(x).
    fn gauss_pdf(self) -> Self {
        let inv_sqrt_2pi = Self::from_f64_lossy(0.398_942_280_401_432_7);
        let half = Self::from_f64_lossy(0.5);
        inv_sqrt_2pi * (-half * self * self).exp()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
