//! PointKAN: hierarchical point-cloud classification built from
//! Kolmogorov-Arnold layers.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: point clouds, normalisation, farthest point sampling and
//!   K-nearest-neighbour grouping.
//! - [`kan`]: B-spline KAN layers, grouped-rational (Efficient-KAN) layers,
//!   Horner evaluation and parameter accounting.
//! - [`blocks`]: Group-Norm with affine transform, S-Pool, the LFP block with
//!   depthwise convolution, ResP blocks, stages and the full classifier.
//! - [`training`]: loss, optimisers, gradient checking, the training loop and
//!   few-shot episodes.
//! - [`app`]: file formats, synthetic data, checkpoints, FLOP estimates and
//!   the command implementations behind the `pointkan` binary.
//!
//! Every differentiable block exposes a forward pass that returns an owned
//! cache and a backward pass that consumes it; there is no global tape.

pub mod app;
pub mod blocks;
pub mod error;
pub mod geometry;
pub mod kan;
pub mod params;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Grouping, PointCloud};
