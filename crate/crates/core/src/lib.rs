//! Infrared small-target detection: tensor core, detector model, training,
//! evaluation metrics, synthetic data pipeline, and filter baselines.

pub mod checkpoint;
pub mod error;
pub mod grid;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{GrayMap, Mask};
pub use model::{Detector, ModelConfig};
pub use tensor::{no_grad, Tensor};
