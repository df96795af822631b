//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the design and simulation code.
///
/// Implemented for `f32` and `f64`. Iterative tolerances are expressed in
/// `f64` and clamped against the machine epsilon of the concrete type, so
/// `f32` designs converge to the precision the type can carry.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// `v`, but never tighter than a small multiple of the type's epsilon.
    #[inline]
    fn tol(v: f64) -> Self {
        let eps = Self::default_epsilon() * Self::lit(64.0);
        let t = Self::lit(v);
        if t < eps {
            eps
        } else {
            t
        }
    }

    #[inline]
    fn infinity() -> Self {
        Self::lit(f64::INFINITY)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_is_clamped_by_precision() {
        assert_eq!(f64::tol(1e-12), 1e-12);
        assert!(f32::tol(1e-12) > 1e-6);
        assert_eq!(f32::lit(0.5), 0.5f32);
        assert!(f64::infinity().is_infinite());
    }
}
