//! Error type shared by every module.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A requested allocation or array shape exceeds what the process can hold.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// A non-finite value appeared during a numerical computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The requested operation is not defined for this model.
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    /// The outer fixed-point iteration did not reach the tolerance.
    #[error(
        "fixed-point iteration did not converge: {iterations} iterations, last distance {last_distance:e} > tol {tol:e}"
    )]
    NonConvergence {
        iterations: usize,
        last_distance: f64,
        tol: f64,
        /// Weighted distances per outer iteration, for post-mortem inspection.
        distances: Vec<f64>,
    },

    /// A config file could not be parsed.
    #[error("config parse error at line {line}, key `{key}`: {message}")]
    Parse {
        line: usize,
        key: String,
        message: String,
    },

    /// Two objects that must share randomness or a grid do not.
    #[error("internal consistency violation: {0}")]
    Internal(String),

    /// I/O failure, annotated with the path involved.
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
