//! Scalar abstraction for the numeric core.
//!
//! The reward model, its loss and gradients, the UCT rule and the activation
//! similarity metric are written against [`Scalar`] so they run in `f32` or
//! `f64`. Everything that touches the environments or files uses `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; exact for `f64`.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 is representable in every float scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
