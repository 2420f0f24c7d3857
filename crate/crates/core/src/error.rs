use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfaError>;

#[derive(Debug, Error)]
pub enum DfaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown domain id {domain} (have {available} encoders)")]
    UnknownDomain { domain: usize, available: usize },

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain {domain} has {remaining} samples left in this epoch, {requested} requested")]
    PoolExhausted {
        domain: usize,
        remaining: usize,
        requested: usize,
    },

    #[error("batch is not domain balanced: {0}")]
    Unbalanced(String),

    #[error("loss is not deterministic under a fixed seed ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite loss term {term} at epoch {epoch}")]
    NumericFailure { term: &'static str, epoch: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DfaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DfaError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        DfaError::Parse {
            line,
            message: message.into(),
        }
    }
}
