//! Scalar abstraction shared by the numeric kernels.
//!
//! Geometry and both trackers are written against [`Real`] so they run in
//! `f32` or `f64`. Everything that touches the wall clock or the file formats
//! is concrete `f64`.

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type usable by the filters: `f32` or `f64`.
pub trait Real: RealField + Copy + FloatConst + FromPrimitive + ToPrimitive {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in target scalar")
}

/// Lossy conversion back to `f64` for reporting.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    ToPrimitive::to_f64(&x).unwrap_or(f64::NAN)
}
