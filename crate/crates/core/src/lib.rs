//! Semi-supervised image segmentation with levels of ensemble sub-models.
//!
//! An initial supervised model is copied into sub-models that are trained on
//! random subsets of pseudo-labeled images. After each level the sub-model
//! outputs are fused by agreement weighting into new pseudo labels, and the
//! number of sub-models halves until one final model remains.

pub mod data;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod schedule;
pub mod training;
pub mod types;

pub use error::{Error, Result};
