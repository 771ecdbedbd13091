//! Scalar abstraction for the geometry kernels.
//!
//! The projection, plane and similarity math is written once over [`Scalar`]
//! and instantiated for `f64` (pipeline default) and `f32` (compact targets).

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable by the geometry kernels: `f32` or `f64`.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into this scalar.
    #[inline]
    fn lit(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("finite literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Tolerance used when validating unit vectors and rotations.
    ///
    /// `1e-9` for `f64`; scaled from machine epsilon for narrower types.
    #[inline]
    fn structural_tolerance() -> Self {
        let eps = Self::default_epsilon() * Self::lit(1.0e3);
        let tight = Self::lit(1.0e-9);
        if eps > tight {
            eps
        } else {
            tight
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_conversion() {
        assert_eq!(<f64 as Scalar>::lit(0.25), 0.25);
        assert_eq!(<f32 as Scalar>::lit(0.25), 0.25f32);
        assert_eq!(<f64 as Scalar>::structural_tolerance(), 1e-9);
        assert!(<f32 as Scalar>::structural_tolerance() > 1e-6);
    }
}
