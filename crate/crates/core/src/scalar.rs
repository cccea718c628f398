//! Scalar abstraction over the floating-point element type.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type for feature, probability, and parameter tensors.
///
/// `f32` is the working precision for training and inference; `f64` is
/// used by tests that need tight numeric agreement (finite-difference
/// gradient checks, decoder score oracles).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + ScalarOperand
    + LinalgScalar
    + Sum<Self>
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for the `f64 -> T` casts that pepper generic numeric code.
#[inline]
pub fn fr<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("finite f64 converts to any Scalar")
}

/// Index of the maximum element; exact ties resolve to the lowest index.
/// Every argmax in the crate (greedy decoding, free-running feedback,
/// calibration) routes through this so tie policy stays uniform.
pub fn argmax_tie_low<T: PartialOrd + Copy>(vals: impl IntoIterator<Item = T>) -> usize {
    let mut best_i = 0;
    let mut best: Option<T> = None;
    for (i, v) in vals.into_iter().enumerate() {
        match best {
            None => {
                best = Some(v);
                best_i = i;
            }
            Some(b) => {
                if v > b {
                    best = Some(v);
                    best_i = i;
                }
            }
        }
    }
    best_i
}
