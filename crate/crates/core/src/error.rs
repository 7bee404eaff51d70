use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("degenerate edge: {0}")]
    DegenerateEdge(String),

    #[error("degenerate overlap: {0}")]
    DegenerateOverlap(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("initialization failure: {0}")]
    InitializationFailure(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    /// Carries the cause in its message rather than as a source, so chained
    /// reports do not print it twice.
    #[error("stage {stage} failed: {cause}")]
    Stage {
        stage: String,
        cause: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
