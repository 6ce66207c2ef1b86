use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of gradients and quantizer arithmetic: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every float scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }

    /// Converts a 32-bit wire scale factor to `Self` without rounding.
    fn from_wire(x: f32) -> Self {
        Self::from_f32(x).expect("f32 embeds in every float scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Round half away from zero, as an integer.
pub(crate) fn round_half_away<T: Scalar>(x: T) -> i64 {
    // Float::round already rounds half away from zero.
    x.round().to_i64().unwrap_or(if x > T::zero() { i64::MAX } else { i64::MIN })
}

/// Smallest `f32` that is `>= x`, for finite nonnegative `x`.
pub(crate) fn f32_round_up(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) < x {
        y.next_up()
    } else {
        y
    }
}
