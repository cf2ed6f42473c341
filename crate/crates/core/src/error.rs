use thiserror::Error;

/// Errors raised across the acquisition simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("exhaustive search over {classes} hypotheses exceeds the limit of {limit}")]
    SearchTooLarge { classes: usize, limit: usize },

    #[error("kernel matrix is not positive definite after jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unknown {kind} '{name}' (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("search space exhausted after {evaluated} evaluations")]
    Exhausted { evaluated: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, found })
    }
}
