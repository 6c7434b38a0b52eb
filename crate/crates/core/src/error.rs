use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Parameters outside the family's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two payloads from different families were combined.
    #[error("family mismatch: {0}")]
    Family(String),
    /// A product or update produced a non-normalizable result.
    #[error("degenerate result: {0}")]
    Degenerate(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An exponent exceeded the representable range.
    #[error("saturation: {0}")]
    Saturation(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("oracle error: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
