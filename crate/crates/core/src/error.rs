//! Crate-wide error type.

/// Errors surfaced by the spotformer library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input lies outside the mathematical domain of an operation
    /// (coincident source/receiver, negative radius, silent reference, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A parameter violates a documented precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Shapes or collections are inconsistent with each other.
    #[error("structural error: {0}")]
    Structure(String),

    /// A numeric routine failed (non-finite values, indefinite matrix, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A scene or experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Audio file I/O failed.
    #[error("audio error: {0}")]
    Audio(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
