//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CemError {
    /// Operand shapes do not conform for the named primitive.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Logarithm of a non-positive element.
    #[error("{op}: log of non-positive value {value} at flat index {index}")]
    LogDomain {
        op: &'static str,
        value: f64,
        index: usize,
    },

    /// `backward` called on a tensor that is not a scalar.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// `backward` called before anything was recorded.
    #[error("backward called on an empty tape")]
    EmptyTape,

    /// A finite-difference probe produced a non-finite value.
    #[error("finite-difference oracle hit a non-finite evaluation at coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    /// Generic contract violation (bad index, dimension, or argument).
    #[error("{0}")]
    Contract(String),

    /// A sampling chain produced a non-finite gradient.
    #[error("chain aborted at step {step}: non-finite gradient")]
    ChainDiverged { step: usize },

    /// Training loss became non-finite; the model is rolled back to the last
    /// finite epoch.
    #[error("training diverged at epoch {epoch}; model restored to last good state")]
    TrainingDiverged { epoch: usize },

    #[error("serialization: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CemError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CemError::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CemError>;
