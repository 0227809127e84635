//! Dynamic Gaussian splatting with rendered velocity fields.
//!
//! A CPU implementation of deformation-based dynamic Gaussian splatting in
//! which every Gaussian also carries a projected 2D velocity that is
//! alpha-composited like color. The rendered velocity field is supervised by
//! optical flow, drives flow-assisted densification, and feeds an extended
//! Kalman filter that refines center trajectories after training.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod dataset;
pub mod deform;
pub mod densify;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod train;
pub mod tvr;

pub use error::{Error, Result};
