use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SmlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SmlError {
    /// Invalid network or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite loss, gradient or parameter during optimization.
    #[error("training diverged at {stage} {index}: {detail}")]
    TrainingDiverged {
        stage: &'static str,
        index: u64,
        detail: String,
    },

    #[error("ingestion error in {path:?} at row {row}, column {column}: {detail}")]
    Ingestion {
        path: PathBuf,
        row: usize,
        column: String,
        detail: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("correlation undefined: zero variance in {0}")]
    UndefinedCorrelation(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("no prediction with positive total sigma to decompose ({excluded} excluded)")]
    EmptyDecomposition { excluded: usize },

    /// A forward cache that does not belong to the network it is fed back into.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl SmlError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        SmlError::Argument(msg.into())
    }
}
