//! Pairwise image registration with untrained coordinate networks.
//!
//! A motion network and an image network, each fed by a multi-resolution
//! hash-grid encoding, are optimized from scratch for every image pair under
//! a single L2 objective. The same model covers rigid and deformable motion
//! (through the motion grid's finest resolution) and single- and multi-modal
//! pairs (through the image network's channel count).

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
