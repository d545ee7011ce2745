//! Scalar abstraction for the numerical core.
//!
//! Every algorithm in this crate is written against [`Real`], which is
//! satisfied by `f32` and `f64`. The trait bundles nalgebra's `RealField`
//! (for decompositions) with the `num-traits` conversion traits used to
//! move between the working precision and `f64` literals / file values.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Send + Sync + 'static
{
    /// Machine epsilon of the working precision.
    const EPSILON: Self;
    const INFINITY: Self;

    /// Converts an `f64` constant into the working precision.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Widens to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }

    fn is_infinite_val(self) -> bool;
    fn is_finite_val(self) -> bool;
}

impl Real for f64 {
    const EPSILON: Self = f64::EPSILON;
    const INFINITY: Self = f64::INFINITY;

    #[inline]
    fn is_infinite_val(self) -> bool {
        self.is_infinite()
    }

    #[inline]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Real for f32 {
    const EPSILON: Self = f32::EPSILON;
    const INFINITY: Self = f32::INFINITY;

    #[inline]
    fn is_infinite_val(self) -> bool {
        self.is_infinite()
    }

    #[inline]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}
