//! Scalar abstraction: everything numeric in this crate is generic over a
//! floating-point type, instantiated as `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the tensor and network code is generic over.
///
/// 32-bit is the normal inference precision; 64-bit is required by the
/// finite-difference oracles, where step sizes below 1e-3 lose their
/// meaningful digits in `f32`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Round-to-nearest conversion from `f64`.
    fn from_f64_rn(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Widening (or identity) conversion to `f64`.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
