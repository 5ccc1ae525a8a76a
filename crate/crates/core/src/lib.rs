//! Spatiotemporal attention for video clip classification.
//!
//! Two pipelines share one f64 tensor engine with reverse-mode gradients:
//! a frame-feature transformer (per-frame CNN features, sequence encoder,
//! max pooling) and a shifted-window video transformer (tubelet embedding,
//! 3D window attention, patch merging).

pub mod attention;
mod binio;
pub mod data;
pub mod embedding;
pub mod error;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
