//! Scalar abstraction for the autodiff kernels.
//!
//! The tape and its primitive operations are written against this trait so
//! the numeric core stays element-type agnostic; everything downstream uses
//! the `f64` aliases exported from the crate root. The identity checks in
//! [`crate::verify`] need tolerances around 1e-8 relative, which rules f32
//! out for the shipped models, but the kernels themselves do not care.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type accepted by the tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion used only for diagnostics and error messages.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
