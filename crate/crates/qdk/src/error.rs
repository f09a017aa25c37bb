//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by quantization, calibration, reconstruction, and
/// simulation routines.
#[derive(Debug, Error)]
pub enum QdkError {
    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor extents did not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A linear solve failed (singular or indefinite system).
    #[error("solver error: {0}")]
    Solver(String),

    /// The rounding optimizer diverged.
    #[error("optimization diverged at step {step} (learning rate {learning_rate}): {detail}")]
    Optimization {
        step: usize,
        learning_rate: f64,
        detail: String,
    },

    /// A layer kind has no gradient path.
    #[error("unsupported layer for gradient capture: {0}")]
    UnsupportedLayer(String),

    /// The instruction stream cannot make progress.
    #[error("schedule error: dependency cycle or unsatisfiable wait involving instructions {0:?}")]
    Schedule(Vec<u64>),

    /// A single tile exceeds on-chip memory even at minimum tile size.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed model container.
    #[error("model file error: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QdkError>;
