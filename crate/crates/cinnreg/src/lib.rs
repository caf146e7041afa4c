//! Ambiguity-aware 2D/3D rigid registration.
//!
//! Registers a 3D density volume to a single 2D projection by estimating a
//! full posterior over the 5-parameter C-arm pose with a conditional
//! invertible network, then classifies the posterior as uni- or multi-modal
//! with a GMM/AIC rule and validates each mode by reprojection error.
//!
//! Module map:
//! - [`phantom`]: procedural volumes with controllable 180° symmetry
//! - [`geometry`]: the 5-parameter pose, transforms, pose sampling
//! - [`drr`]: cone-beam projection rendering and image metrics
//! - [`nncore`]: dense/conv/batchnorm layers, backprop, Adam
//! - [`condnet`]: conditioning network embedding (volume, image) pairs
//! - [`cinn`]: conditional coupling-block flow and posterior sampling
//! - [`modes`]: GMM fitting, AIC comparison, mode extraction
//! - [`eval`]: reprojection-error validation harness
//! - [`config`], [`dataset`], [`train`]: pipeline configuration, dataset
//!   generation, and the two training stages driving the CLI

pub mod cinn;
pub mod condnet;
pub mod config;
pub mod dataset;
pub mod drr;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod modes;
pub mod nncore;
pub mod phantom;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
