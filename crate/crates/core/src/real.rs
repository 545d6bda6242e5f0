//! Scalar abstraction for the numerical core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the engine is generic over.
///
/// `f64` is the working precision everywhere that matters; `f32` is supported
/// so the kernels can be exercised at reduced precision.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum<Self> + Display + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for values a float type
    /// cannot represent at all (never the case for finite `f64` into `f32`,
    /// which rounds).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must convert to scalar")
    }

    /// Lossy view as `f64`, used at reporting boundaries.
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {}
impl Real for f32 {}
