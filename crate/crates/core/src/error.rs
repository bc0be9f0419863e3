//! Crate-wide error type.

/// Errors produced by tensor ops, layers and the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: normalized axis has zero extent")]
    EmptyAxis { op: &'static str },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("singular reflection direction{}", couple.map(|c| format!(" in couple {c}")).unwrap_or_default())]
    SingularDirection { couple: Option<usize> },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid pipeline state: {0}")]
    State(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("numerical invariant violated: {0}")]
    NumericalInvariant(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
