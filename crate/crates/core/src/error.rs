use std::path::PathBuf;

use thiserror::Error;

/// Gradient norms below this are treated as zero when normalizing a
/// perturbation direction.
pub const DEGENERATE_NORM: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} is not valid here ({expected})")]
    InvalidLabel { label: i64, expected: String },

    /// The perturbation direction has (numerically) zero norm, so the
    /// normalized step is undefined. Callers that own a policy for this case
    /// (the optimizers do) should skip the perturbation instead.
    #[error("degenerate gradient: norm {norm:e} is below {DEGENERATE_NORM:e}")]
    DegenerateGradient { norm: f64 },

    #[error("{family} models do not expose a hidden activation / last layer")]
    UnsupportedModel { family: &'static str },

    #[error("the {stratum} stratum is empty")]
    EmptyStratum { stratum: &'static str },

    #[error("test accuracy is undefined for the zero weight vector")]
    UndefinedAccuracy,

    #[error("parse error in {path} at byte offset {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite training loss at epoch {epoch}; run aborted")]
    NonFiniteLoss { epoch: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
