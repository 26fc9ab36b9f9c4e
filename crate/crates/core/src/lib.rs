//! MobileNetV2 inference engine with a food-image classification benchmark harness.
//!
//! The engine runs single-precision NCHW inference with batch norm folded at load
//! time. Around it sit the image pipeline, the Food-11 dataset index, head-only
//! transfer learning with SGD, evaluation metrics, and the resolution sweep.

pub mod augment;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod loader;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use model::MobileNetV2;
pub use tensor::{Matrix, Tensor};
