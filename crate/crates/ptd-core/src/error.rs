//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("unsupported checkpoint version {got} (supported: {supported})")]
    Version { got: u32, supported: u32 },

    #[error("checkpoint manifest inconsistent: {0}")]
    Manifest(String),

    #[error("file truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("verification failed: {0}")]
    Verify(String),
}

impl Error {
    /// Process exit code used by the command-line harness.
    /// 1 = config error, 2 = data/file error, 3 = numeric failure, 4 = failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ShapeMismatch(_) => 1,
            Error::Data(_)
            | Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Manifest(_)
            | Error::Truncated { .. } => 2,
            Error::NonFinite { .. } => 3,
            Error::Verify(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
