use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] incount_tensor::TensorError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("annotation schema violation in {file}: {detail}")]
    Schema { file: PathBuf, detail: String },

    #[error("point {index} of sample '{sample}' is out of bounds: ({x}, {y}) vs {width}x{height}")]
    PointOutOfBounds {
        sample: String,
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("negative coordinate ({x}, {y}) cannot be binned")]
    NegativeCoordinate { x: f64, y: f64 },

    #[error("cannot place {requested} objects of radius up to {radius} in a {extent}x{extent} image")]
    ImpossiblePacking {
        requested: usize,
        radius: f64,
        extent: usize,
    },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("marginals must be normalized: sum a = {sum_a}, sum b = {sum_b}")]
    NotNormalized { sum_a: f64, sum_b: f64 },

    #[error("cost grid contains a non-finite value at ({row}, {col})")]
    NanCost { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("task {got} out of order; expected task {expected}")]
    TaskOrder { expected: usize, got: usize },

    #[error("unknown task index {index}; {completed} tasks completed")]
    UnknownTask { index: usize, completed: usize },

    #[error("dataset for task {task} is empty")]
    EmptyDataset { task: usize },

    #[error("missing test set for task {task}")]
    MissingTestSet { task: usize },

    #[error("NAE undefined: ground-truth count is 0 for sample '{sample_id}'")]
    ZeroGroundTruth { sample_id: String },

    #[error("metrics require at least one record")]
    EmptyRecords,

    #[error("importance store is empty; run accumulation after a completed task first")]
    MissingImportance,

    #[error("checkpoint incompatible with config: {0}")]
    CheckpointMismatch(String),

    #[error("corrupt checkpoint {path}: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("output directory is locked by another run: {0}")]
    OutputLocked(PathBuf),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
