//! Scalar abstraction for the core math.
//!
//! Everything numeric in the model/controller layers is generic over [`Real`],
//! so the same code runs in `f32` or `f64`. The simulation harness and the
//! verification tolerances are stated for `f64`.

use nalgebra::RealField;
use num_traits::FromPrimitive;

/// Floating-point scalar usable by the core math: `f32` or `f64`.
pub trait Real: RealField + FromPrimitive + Copy {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub(crate) fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in the scalar type")
}
