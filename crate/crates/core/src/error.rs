//! Error type shared by every module.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong, grouped by the exit code the CLI maps it to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested mode basis cannot be represented on the pixel grid.
    #[error("ill-conditioned mode basis: {0}")]
    IllConditionedBasis(String),

    /// A documented precondition on the inputs does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A requested evaluation lies outside the causally determined domain.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// Sampler health checks failed.
    #[error("sampler diagnostics failed: {0}")]
    Diagnostics(String),

    /// The input has no spread, so a normalised quantity is undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A fit could not be carried out.
    #[error("fit failure: {0}")]
    FitFailure(String),

    /// An iterative numerical routine did not meet its tolerance.
    #[error("tolerance not reached: {0}")]
    Tolerance(String),

    /// Malformed or unknown configuration entry.
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// A file does not follow the expected container layout.
    #[error("format error in {path:?}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Another process holds the output directory.
    #[error("output directory {0:?} is locked by another writer")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } => 2,
            Error::IllConditionedBasis(_)
            | Error::Precondition(_)
            | Error::OutOfDomain(_)
            | Error::Diagnostics(_)
            | Error::Degenerate(_)
            | Error::FitFailure(_)
            | Error::Tolerance(_) => 3,
            Error::Format { .. } | Error::Locked(_) | Error::Io(_) => 4,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}
