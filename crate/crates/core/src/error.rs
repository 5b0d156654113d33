use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// Operation invoked in a way its contract forbids (e.g. backward on a
    /// non-scalar tensor).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A parameter is missing the gradient required by the optimizer.
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    /// Training aborted (non-finite loss, empty split, ...).
    #[error("training error: {0}")]
    Training(String),

    /// Malformed file contents.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension { op, msg: msg.into() }
    }
}
