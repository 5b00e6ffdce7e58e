//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible at a specific layer.
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask does not match network: {0}")]
    MaskMismatch(String),

    #[error("layer {layer}: budget unreachable, would require masking every unit")]
    BudgetUnreachable { layer: usize },

    #[error(
        "explicit budgets violate the global constraint: requested {requested:.3} \
         parameters removed vs target {target:.3} (tolerance {tolerance:.3})"
    )]
    BudgetConstraint {
        requested: f64,
        target: f64,
        tolerance: f64,
    },

    #[error("layer {layer}: every unit is masked")]
    AllUnitsMasked { layer: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Fine-tuning diverged twice past the guard threshold (or went NaN).
    #[error("fine-tuning diverged at step {step} (loss {loss})")]
    FinetuneDiverged { step: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("IDX format error in {path}: {reason}")]
    IdxFormat { path: String, reason: String },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
