//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the estimation code is generic over (`f32` or `f64`).
///
/// Distribution functions (normal and Student-t) are evaluated in `f64`
/// and converted back, so lower-precision scalars only lose accuracy in the
/// linear algebra.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal. Panics only for values the type cannot represent at all.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(count: usize) -> Self {
        Self::from_usize(count).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn halve<T: Real>(x: T) -> T {
        x * T::lit(0.5)
    }

    #[test]
    fn literal_round_trip() {
        assert_eq!(halve(3.0_f64), 1.5);
        assert_eq!(halve(3.0_f32), 1.5);
        assert_eq!(f32::from_count(7).as_f64(), 7.0);
    }
}
