//! Multi-view body pose fitting in a canonical parameter space.
//!
//! Each camera view gets its own global orientation and translation while
//! the body pose and shape are shared. Fitting runs in two stages:
//! independent per-view fits, then a joint refinement anchored to the
//! stage-one estimates. The crate also provides a toy body model, seeded
//! synthetic multi-view scenes, 3D pose metrics and the `mvpose` CLI.
//!
//! Numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for common use.

// `!(x <= tol)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod body;
pub mod cli;
pub mod fitting;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod observations;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod toy;

pub type BodyModelF64 = body::BodyModel<f64>;
pub type BodyModelF32 = body::BodyModel<f32>;
pub type BodyParamsF64 = body::BodyParams<f64>;
pub type BodyParamsF32 = body::BodyParams<f32>;
pub type CanonicalParamsF64 = fitting::CanonicalParams<f64>;
pub type CanonicalParamsF32 = fitting::CanonicalParams<f32>;
pub type IntrinsicsF64 = geometry::CameraIntrinsics<f64>;
pub type IntrinsicsF32 = geometry::CameraIntrinsics<f32>;
pub type Detection2DF64 = observations::Detection2D<f64>;
pub type Detection2DF32 = observations::Detection2D<f32>;
