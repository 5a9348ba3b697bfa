//! Discrete prompt selection by vector quantization for class-incremental
//! learning on top of a frozen transformer encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: `f64` tensors and a reverse-mode differentiation graph with
//!   stop-gradient and straight-through connectors.
//! - [`backbone`]: a small transformer encoder with prefix-tuning injection.
//! - [`prompt`]: the prompt pool, key-query scoring, quantization and the
//!   two codebook regularizers.
//! - [`cil`]: the per-task training loop, class statistics and classifier
//!   calibration.
//! - [`data`]: deterministic synthetic benchmarks and their file format.
//! - [`metrics`]: accuracy matrices, final and cumulative average accuracy.

// `!(x > 0.0)` rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod cil;
pub mod data;
mod error;
pub mod metrics;
pub mod optim;
pub mod prompt;
pub mod tensor;

pub use backbone::{BackboneConfig, FrozenBackbone, MsaBlockParams};
pub use cil::{ClassStatistics, ClassifierHead, PromptMode, TrainConfig};
pub use data::{BenchmarkParams, TaskDataset, TaskSequence};
pub use error::{Error, Result};
pub use metrics::AccuracyMatrix;
pub use prompt::{LossWeights, PromptPool};
pub use tensor::{Graph, Tensor, Var};
