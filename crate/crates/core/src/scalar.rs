//! Scalar abstraction so the math core runs on either f32 or f64.
//!
//! Training uses f32; gradient verification and geometry use f64.

use std::fmt;

/// Floating-point scalar usable by every math module in this crate.
pub trait Scalar:
    Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + nalgebra::RealField
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::FloatConst
    + 'static
{
    /// Lossy conversion from f64 (panics only on non-representable input).
    fn of(v: f64) -> Self;
    /// Widening conversion to f64.
    fn as_f64(self) -> f64;
    /// True when neither NaN nor infinite.
    fn finite(self) -> bool;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn finite(self) -> bool {
        self.is_finite()
    }
}
