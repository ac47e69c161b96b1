//! Landmark-guided semantic part segmentation.
//!
//! A fully convolutional landmark detector produces one heatmap per facial
//! landmark; the decoded landmarks are re-encoded as Gaussian confidence maps,
//! stacked with the RGB image and fed to a second fully convolutional network
//! that labels every pixel with a facial part.
//!
//! Everything numeric is implemented here: polygon rasterisation for mask
//! construction, a small reverse-mode autodiff engine with the convolution
//! operators the networks need, SGD with momentum, and the evaluation metrics.

pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Number of landmarks in the 68-point Multi-PIE markup.
pub const NUM_LANDMARKS: usize = 68;

/// Number of part classes, background included.
pub const NUM_CLASSES: usize = 8;
