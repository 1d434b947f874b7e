//! Pretext-invariant contrastive representation learning on a small CPU
//! encoder: tensors with reverse-mode gradients, jigsaw and rotation
//! transforms, a memory-bank contrastive objective, training loops and the
//! evaluation probes used to analyse the learned features.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
