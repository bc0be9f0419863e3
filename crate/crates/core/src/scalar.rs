//! Scalar abstraction: the numeric element type of every tensor.
//!
//! All math in this crate is written against [`Scalar`] so the same layers
//! run in `f32` or `f64`. The training pipeline and CLI pin `f64` (see the
//! aliases at the crate root).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Floating-point element type usable by tensors, layers and optimizers.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from `f64`; used for constants and RNG draws.
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to Scalar")
    }

    /// Widening conversion to `f64`; exact for `f32` and `f64`.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
