//! Pseudo-label generation for infrared small targets from single-point
//! prompts.
//!
//! The pipeline turns clicks into Gaussian energy blobs, feeds a saliency
//! backend a three-channel `(image, edges, energy)` input, thresholds and
//! clusters the saliency map, and keeps only the clusters the prompts vouch
//! for. The [`metrics`] module scores the resulting labels.

pub mod error;
pub mod input_assembly;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod prompt_encoding;
pub mod saliency_backend;
pub mod types;

pub use error::{ForgeError, Result};
