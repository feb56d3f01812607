use thiserror::Error;

/// Errors raised by tensor construction, graph recording and optimization.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("zero-sized dimension in shape {0:?}")]
    EmptyDim(Vec<usize>),
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss does not depend on any tensor that requires a gradient")]
    DetachedLoss,
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("optimizer step without any populated gradient")]
    MissingGrads,
    #[error("parameter `{0}` not found")]
    UnknownParam(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, detail: detail.into() }
}
