use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("terminal node is not a scalar (shape {shape:?})")]
    NonScalarTerminal { shape: Vec<usize> },
    #[error("backward_eval called before forward_eval")]
    BackwardBeforeForward,
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid backbone: {0}")]
    InvalidBackbone(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("level {level} out of range 1..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("budget {budget} is below the level-1 parameter count {minimum}")]
    BudgetBelowMinimum { budget: usize, minimum: usize },
    #[error("missing distillation targets for task {task} level {level} sample {index}")]
    MissingTargets {
        task: usize,
        level: usize,
        index: usize,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
