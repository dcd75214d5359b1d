//! Lidar/spectral point-cloud fusion and dual-branch transformer segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: tensors, reverse-mode gradients, gradient checking
//! - [`geom`]: kd-tree, kNN, farthest-point sampling, blocks, normalisation
//! - [`fuse_io`]: point clouds, rasters, 2D/3D label bridging, checkpoints
//! - [`attention`]: scalar, offset and vector self-attention
//! - [`model`]: the dual-branch encoder/decoder with cross-point attention
//! - [`train`]: losses, Adam, training loop, block-wise prediction
//! - [`metrics`]: confusion matrix scores
//! - [`synth`] and [`config`]: synthetic scenes and run configuration

pub mod attention;
pub mod config;
pub mod error;
pub mod fuse_io;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
