//! Scalar abstraction for the pure-math layer.
//!
//! Formula-level code (acceptance probabilities, variance estimators, sample
//! allocation, schedules) is generic over [`Scalar`] so it works for `f32`
//! and `f64` alike. The crate root fixes [`crate::Real`] = `f64` for
//! everything that touches RNG streams, linear algebra, or file output.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + core::iter::Sum + core::ops::AddAssign + core::fmt::Debug + Send + Sync
{
    /// Lossy conversion from `f64` (exact for `f64`).
    fn from_real(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    /// Conversion from a count; counts in this crate stay far below 2^53.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts to every Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
