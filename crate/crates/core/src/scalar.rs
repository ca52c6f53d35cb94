//! Scalar abstraction shared by every numeric module.
//!
//! The geometry, body model, loss, solver and metric code is generic over
//! [`Real`], which is implemented for `f32` and `f64`. Scene files and the
//! command-line tool work in `f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the fitting pipeline.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal must be representable")
    }

    /// Tolerance used when validating that a matrix is a rotation.
    ///
    /// Scales with the precision of the type: `~1.5e-7` for `f64`,
    /// `~3.5e-3` for `f32`.
    #[inline]
    fn rotation_tolerance() -> Self {
        Self::default_epsilon().sqrt() * Self::lit(10.0)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}
