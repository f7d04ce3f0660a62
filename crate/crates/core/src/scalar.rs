//! Scalar abstraction shared by all numerical modules.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_complex::Complex;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar the numerical core is generic over (`f32` or `f64`).
///
/// Tolerances throughout the crate are written as `f64` literals and
/// converted with [`Real::lit`]; they are tuned for double precision.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Machine epsilon of the scalar type.
    #[inline]
    fn eps() -> Self {
        Self::default_epsilon()
    }

    #[inline]
    fn cplx(re: Self, im: Self) -> Complex<Self> {
        Complex::new(re, im)
    }
}

impl Real for f32 {}
impl Real for f64 {}
