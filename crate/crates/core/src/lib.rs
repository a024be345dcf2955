//! Mamba-UNet: a U-shaped segmentation network built from Visual State Space
//! blocks, implemented from the numeric core up.
//!
//! Layers, bottom to top:
//!
//! - [`array`], [`ops`], [`graph`], [`tape`]: dense arrays, kernels and
//!   reverse-mode differentiation over a closed operation set;
//! - [`ssm`]: continuous SSMs, zero-order hold, sequential / parallel /
//!   selective scans;
//! - [`cross_scan`]: four-direction unfolding of 2-D maps (SS2D);
//! - [`vss`]: the Visual State Space block;
//! - [`model`]: patch embedding, merging, expanding, skip fusion and the full
//!   encoder-bottleneck-decoder;
//! - [`metrics`]: confusion counts, overlap scores, HD95, ASD, histograms;
//! - [`train`]: synthetic data, loss, SGD and the checkpointing loop.

pub mod array;
pub mod bench;
pub mod cross_scan;
pub mod error;
pub mod fsio;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod ssm;
pub mod tape;
pub mod train;
pub mod vss;

pub use array::Array;
pub use error::{Error, Result};
pub use graph::{Eager, Graph};
pub use tape::{Gradients, Tape, Var};
