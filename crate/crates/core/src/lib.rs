//! Core library for the two-stage lung-screening pipeline: a small
//! differentiable-tensor engine, MMD domain losses, the feature-fusion
//! classifier, a residual U-Net segmenter, and the data plumbing around them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod seg;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Param, Tensor};

/// Worker-thread cap from `DFF_THREADS`; defaults to 1 (fully serial).
pub fn thread_cap() -> usize {
    std::env::var("DFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
