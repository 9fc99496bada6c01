use std::path::PathBuf;

/// Problems decoding one of the binary formats. Every variant carries the
/// byte offset where decoding stopped.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported version {found} at byte {offset} (expected {expected})")]
    VersionMismatch { offset: u64, found: u32, expected: u32 },

    #[error("truncated {what} at byte {offset}: needed {needed} bytes, {available} left")]
    Truncated { offset: u64, what: &'static str, needed: u64, available: u64 },

    #[error("invalid {what} at byte {offset}: {detail}")]
    Invalid { offset: u64, what: &'static str, detail: String },
}

impl FormatError {
    pub fn offset(&self) -> u64 {
        match self {
            FormatError::BadMagic { .. } => 0,
            FormatError::VersionMismatch { offset, .. }
            | FormatError::Truncated { offset, .. }
            | FormatError::Invalid { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: bad value for '{key}': {detail}")]
    BadValue { line: usize, key: String, detail: String },

    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },

    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SdrcError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] sdrc_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SdrcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SdrcError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        SdrcError::Format { path: path.into(), source }
    }

    /// Process exit code: 1 for usage and configuration mistakes, 2 for
    /// everything that went wrong with data or a contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            SdrcError::Usage(_) | SdrcError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = SdrcError> = std::result::Result<T, E>;
