use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both operands.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (bad rank, bad rates, unknown site names, …).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-range data (bad labels, corrupt weight files, …).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse (backward on a non-scalar, double backward, …).
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical failure (NaN gradients, non-converging eigensolver, …).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// I/O failure annotated with the offending path.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
