//! Floating-point scalar abstraction.
//!
//! Everything on the float side of the compiler (model parameters, the float
//! reference pass, calibration statistics, quantizer arithmetic) is generic
//! over [`Real`], so the same code runs in `f32` (the model-file precision) or
//! `f64` (useful when comparing against high-precision references).

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable for model parameters and float inference.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless widening to `f64`.
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Conversion from `f64`, rounding to the nearest representable value.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    /// Conversion from a model-file value.
    fn from_f32_lossy(v: f32) -> Self {
        Self::from_f32(v).unwrap_or_else(Self::nan)
    }

    /// Narrowing to the model-file precision.
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `ceil(log2(x))` for positive finite `x`, computed exactly on the binary
/// exponent so that powers of two are never off by one.
pub fn ceil_log2<F: Real>(x: F) -> i32 {
    debug_assert!(x > F::zero() && x.is_finite());
    let v = x.to_f64_lossless();
    let mut e = v.log2().floor() as i32;
    // Repair floating rounding of log2 near exact powers of two.
    while 2f64.powi(e) > v {
        e -= 1;
    }
    while 2f64.powi(e + 1) <= v {
        e += 1;
    }
    if 2f64.powi(e) == v {
        e
    } else {
        e + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_exact_powers() {
        assert_eq!(ceil_log2(1.0f64), 0);
        assert_eq!(ceil_log2(2.0f64), 1);
        assert_eq!(ceil_log2(0.5f32), -1);
        assert_eq!(ceil_log2(8.0f64), 3);
    }

    #[test]
    fn ceil_log2_between_powers() {
        assert_eq!(ceil_log2(0.375f64), -1);
        assert_eq!(ceil_log2(6.5f64), 3);
        assert_eq!(ceil_log2(1.0000001f64), 1);
        assert_eq!(ceil_log2(0.3f32), -1);
    }
}
