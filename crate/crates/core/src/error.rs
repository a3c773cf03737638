use thiserror::Error;

/// Errors raised by estimation, inference and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("transition matrix is not stationary (spectral norm {norm:.6} >= 1)")]
    NonStationary { norm: f64 },

    #[error("dantzig program infeasible for row {row} at tau = {tau:e}; raise tau")]
    Infeasible { row: usize, tau: f64 },

    #[error("linear program failed to certify optimality for row {row}: {reason}")]
    LpCertificate { row: usize, reason: String },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("em iteration {iteration}: {source}")]
    Em {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad arguments or malformed input files, as opposed to
    /// failures of the numerical routines themselves.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::Dimension(_) | Error::Parse(_) | Error::Io { .. } => {
                true
            }
            Error::Em { source, .. } => source.is_usage(),
            _ => false,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Em {
            iteration,
            source: Box::new(self),
        }
    }
}
