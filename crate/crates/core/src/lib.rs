//! Differentiable ray-based rendering of 3D Gaussian scenes with
//! closed-form transmittance and frustum-exact tile association.

// constants are kept digit for digit as published; `!(x > 0.0)` rejects NaN
#![allow(clippy::excessive_precision, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod association;
pub mod camera;
pub mod cli;
pub mod error;
pub mod gradients;
pub mod math;
pub mod metrics;
pub mod oracle;
pub mod ply;
pub mod raster;
pub mod render;
pub mod scene;
pub mod sh;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
