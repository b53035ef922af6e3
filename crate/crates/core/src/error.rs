//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. Shape and numeric problems are reported
/// eagerly with enough context to locate the offending operation.
#[derive(Debug, Error)]
pub enum CdlError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value produced where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Thresholded adjacency contains a directed cycle.
    #[error("cyclic graph: {0}")]
    CyclicGraph(String),

    /// Malformed dataset, checkpoint, or report file.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CdlError>;
