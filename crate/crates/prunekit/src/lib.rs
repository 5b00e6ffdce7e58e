//! Structured and unstructured pruning for small feed-forward networks.
//!
//! The crate bundles everything needed to run pruning experiments end to end
//! on desk-scale problems:
//!
//! - [`tensor`] / [`layer`] / [`network`]: a self-contained f64 network engine
//!   (dense and 2-d convolutional layers) with exact backpropagation,
//!   neuron-scaling hooks, and parameter/FLOP accounting.
//! - [`criteria`]: the importance-criterion family used to rank units for
//!   removal, from plain weight magnitude up to the path-integrated
//!   magnitude-times-gradient score, plus quadrature oracles and trajectory
//!   logging.
//! - [`pruner`]: layer budget computation, the greedy remove/rescore loop,
//!   mask bookkeeping, and physical compaction of masked structures.
//! - [`trainer`]: mask-aware SGD fine-tuning and accuracy evaluation.
//! - [`data`]: seeded synthetic datasets, an IDX image loader, and
//!   deterministic batch streams.
//! - [`experiment`]: config-driven experiment drivers (criterion ablations,
//!   schedule comparisons, sparsity sweeps) with CSV/JSON reports.
//!
//! Everything is deterministic given a seed; no global state.

pub mod checkpoint;
pub mod criteria;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod layer;
pub mod network;
pub mod pruner;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layer::{Activation, Layer};
pub use network::{Batch, GradientSet, Network};
pub use tensor::Tensor;
