use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum TabError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {op}")]
    NumericInput { op: &'static str },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("every target position is ignored; loss is empty")]
    EmptyLoss,
    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid edit at `{field}`: {msg}")]
    Edit { field: String, msg: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("training diverged at stage {stage} epoch {epoch}: loss is not finite")]
    Divergence { stage: u8, epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TabError> = std::result::Result<T, E>;
