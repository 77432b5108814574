use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// What went wrong while reading one of the binary formats.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("shape does not match the reference model: {0}")]
    ShapeMismatch(String),
    #[error("invalid field: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tinynav_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, source: FormatError) -> Self {
        Error::Format { path: path.as_ref().to_path_buf(), source }
    }

    /// True for problems with the caller's inputs rather than the environment.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Format { .. } | Error::Json { .. } => true,
            Error::Core(e) => matches!(
                e,
                tinynav_core::Error::InvalidWorld(_)
                    | tinynav_core::Error::TooShortRecording { .. }
                    | tinynav_core::Error::NonMonotonicTimestamps { .. }
                    | tinynav_core::Error::DimensionMismatch { .. }
                    | tinynav_core::Error::InvalidConfig(_)
            ),
            _ => false,
        }
    }
}
