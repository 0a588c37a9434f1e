//! Attention blocks (coordinate attention, CBAM, 2-D multi-head self-attention and
//! their CBAM-then-self-attention composition) on a small reverse-mode autodiff
//! core, a toy single-class segmentation network that hosts them, a synthetic
//! debris-scene generator, and box/mask detection metrics.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub mod attention;
pub mod dataset;
pub mod diagnostics;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod trainer;
