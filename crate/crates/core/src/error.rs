use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Error, Debug)]
pub enum SbiError {
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("unknown graph input `{0}`")]
    UnknownInput(String),

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("Cholesky factorization failed: {0}")]
    CholeskyFailure(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unknown simulator `{0}`")]
    UnknownSimulator(String),

    #[error("parameter outside the prior box")]
    OutsidePriorBox,

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("output `{0}` exists; pass --force to overwrite")]
    AlreadyExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SbiError>;
