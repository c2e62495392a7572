//! SwinIFS: landmark-guided face super-resolution.
//!
//! The crate covers the full pipeline: dataset preparation (landmark crop,
//! bicubic degradation), Gaussian heatmap priors, the shifted-window
//! transformer backbone with pixel-shuffle reconstruction, hybrid l1 +
//! perceptual training, full-reference metrics, and a deterministic training
//! and evaluation harness with a CLI.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
