use thiserror::Error;

/// Errors raised anywhere in the learner stack.
#[derive(Debug, Error)]
pub enum MoclError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("composition error: {0}")]
    Composition(String),

    #[error("unsupported module kind: {0}")]
    UnsupportedKind(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged on task {task} at step {step}: non-finite loss")]
    Divergence { task: usize, step: usize },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MoclError> = std::result::Result<T, E>;
