//! Floating point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Number of bytes per element, used by the allocation log.
    const BYTES: usize;

    /// Lossy conversion from `f64`; panics only for types that cannot
    /// represent finite doubles at all, which neither `f32` nor `f64` is.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Gauss error function.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }
}
