use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("warp integrand exponent {exponent} out of range")]
    Quadrature { exponent: f64 },

    #[error("all class weights are -inf; the chain state is numerically dead")]
    DeadState,

    #[error("no class satisfies the M-step preconditions")]
    DegenerateFit,

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Quadrature { .. } => "quadrature",
            Error::DeadState => "dead_state",
            Error::DegenerateFit => "degenerate_fit",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
