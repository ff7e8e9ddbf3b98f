use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op} requires a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("graph already consumed by a backward pass; re-run the forward trace")]
    GraphConsumed,

    #[error("parameter {index} has no gradient buffer (requires_grad is false)")]
    MissingGradient { index: usize },

    #[error("batch index {index} out of range for batch size {batch}")]
    BatchIndex { index: usize, batch: usize },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}
