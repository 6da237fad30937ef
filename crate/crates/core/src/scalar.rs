//! Scalar abstraction the numeric core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors and state-space kernels.
///
/// `f64` is the default everywhere in the shipped pipeline; `f32` is provided
/// for callers that can tolerate the precision loss. Gradient checking only
/// makes sense at `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` literal or threshold.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    /// Widen to `f64` for reporting, metrics, and serialization.
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
