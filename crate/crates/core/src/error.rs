use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of its allowed range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric argument is outside the function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation is not valid in the object's current state.
    #[error("state error: {0}")]
    State(String),

    /// A document does not match the clip or layout schema.
    #[error("parse error at {path}: {field}: {message}")]
    Parse {
        path: String,
        field: String,
        message: String,
    },

    /// Loaded data is inconsistent (bad checkpoint, too many people, ...).
    #[error("data error: {0}")]
    Data(String),

    /// The finite-difference oracle hit a non-finite function value.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Prefixes an I/O error with the path it concerns.
pub(crate) fn path_err(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
