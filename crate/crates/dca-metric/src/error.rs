use thiserror::Error;

/// Errors produced by input validation, metric computation, training, and
/// file I/O across the crate.
#[derive(Debug, Error)]
pub enum DcaError {
    /// A precondition on caller-supplied data or configuration was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A feature matrix contained a NaN or infinite entry.
    #[error("non-finite feature value in row {row}")]
    NonFinite { row: usize },

    /// A binary file did not start with the expected magic bytes.
    #[error("{context}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        context: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    /// A binary file used a format version this build does not understand.
    #[error("{context}: unsupported format version {found}, expected {expected}")]
    VersionMismatch {
        context: &'static str,
        expected: u16,
        found: u16,
    },

    /// A binary file ended before the payload promised by its header.
    #[error("{context}: truncated file, {missing} byte(s) missing")]
    Truncated {
        context: &'static str,
        missing: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DcaError>;

impl DcaError {
    /// Convenience constructor for validation failures.
    pub fn invalid(msg: impl Into<String>) -> Self {
        DcaError::InvalidInput(msg.into())
    }
}
