//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the core library.
///
/// Variants are grouped by how a caller should react: configuration errors
/// mean the inputs can never work, shape/usage errors indicate a programming
/// mistake at a call site, `NotFound` is an expected data condition (an
/// estimator could not find a matching source and the pair should be skipped
/// and tallied), and `Io`/`Format` wrap file-level failures.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration value (or combination) is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes or tape node usage do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A tape, mask, or site was used in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// No candidate satisfied a matching requirement (e.g. no source example
    /// with the requested concept value). Callers skip and tally these.
    #[error("not found: {0}")]
    NotFound(String),

    /// An on-disk artifact violates its schema.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Wraps a file-level I/O error so the message names the path involved.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        CoreError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}
