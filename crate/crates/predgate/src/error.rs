//! Crate-wide error type and result alias.

use std::fmt;

/// Unified error for configuration, usage, file-format, and verification
/// failures. The CLI maps variants onto its exit-code contract: `Verification`
/// exits 1, everything else here exits 2.
#[derive(Debug)]
pub enum Error {
    /// Shape or wiring mismatch: incompatible tensors, kernels, or stack configs.
    Config(String),
    /// API misuse: bad argument combinations, non-scalar loss, unknown keys.
    Usage(String),
    /// A check ran to completion and the checked property does not hold.
    Verification(String),
    /// File does not start with the expected magic bytes.
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    /// File magic is right but the format version is not supported.
    UnsupportedVersion { found: u16, supported: u16 },
    /// File ended (or has trailing garbage) where the format says otherwise.
    Truncated { context: String },
    /// OS-level I/O failure with the path that caused it.
    Io { context: String, source: std::io::Error },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        Error::Verification(msg.into())
    }

    pub fn truncated(context: impl Into<String>) -> Self {
        Error::Truncated { context: context.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Verification(msg) => write!(f, "verification failure: {msg}"),
            Error::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                found
            ),
            Error::UnsupportedVersion { found, supported } => {
                write!(f, "unsupported format version {found} (supported: {supported})")
            }
            Error::Truncated { context } => write!(f, "truncated or malformed file: {context}"),
            Error::Io { context, source } => write!(f, "i/o error ({context}): {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
