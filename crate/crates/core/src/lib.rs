//! Multi-label aerial image classification: a residual CNN feature
//! extractor, a class-specific residual attention head with sigmoid/
//! threshold decisioning, the AP/mAP/OP/OR/OF1 evaluation suite, and a
//! train/evaluate/predict pipeline, all in 64-bit floating point with
//! reverse-mode gradients.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
