//! Scalar abstraction for tensor storage.
//!
//! Bulk data may be stored in `f32` or `f64`; every reduction (sums, moments,
//! matrix products, losses) is accumulated in `f64` regardless of the storage
//! width.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point storage type for tensor data.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Widen to `f64` for accumulation.
    fn to_f64_lossy(self) -> f64;

    /// Narrow from an `f64` accumulator back to storage width.
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
