//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the toolkit computes in: `f32` or `f64`.
///
/// `Display` and `FromStr` are required so that checkpoints and feature tables
/// round-trip exactly; Rust's float formatting emits the shortest decimal
/// string that parses back to the same bits.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Display
    + FromStr
    + Debug
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant, panicking only if the value is not representable.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("constant representable in scalar type")
    }

    fn from_usize_lossy(value: usize) -> Self {
        Self::from_usize(value).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
