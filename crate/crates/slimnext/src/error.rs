//! Error taxonomy shared by every module. Variants map onto the CLI exit
//! codes: usage/config problems exit 1, data and file problems exit 2,
//! violated internal invariants exit 3.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Bad command-line usage or an invalid pipeline/model config.
    Usage(String),
    /// Mismatched tensor shapes; the message names the offending axis.
    Shape(String),
    /// Operation applied to the wrong dtype (e.g. conv over int8).
    Dtype(String),
    /// Dataset or input ingestion problem (missing file, bad record count).
    Data(String),
    /// Underlying I/O failure, with the path that caused it.
    Io(String, std::io::Error),
    /// Malformed model file.
    Format(FormatError),
    /// An internal invariant was violated; always a bug, never user error.
    Internal(String),
}

/// Distinct failure modes when reading a serialized model.
#[derive(Debug, PartialEq, Eq)]
pub enum FormatError {
    BadMagic,
    VersionMismatch { found: u32, supported: u32 },
    TruncatedPayload { expected: u64, found: u64 },
    ChecksumMismatch,
    BadHeader(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io(..) | Error::Format(_) => 2,
            Error::Shape(_) | Error::Dtype(_) | Error::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Dtype(m) => write!(f, "dtype error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Io(path, e) => write!(f, "io error on {path}: {e}"),
            Error::Format(e) => write!(f, "model format error: {e}"),
            Error::Internal(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

impl std::fmt::Display for FormatError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatError::BadMagic => write!(f, "bad magic, not a model file"),
            FormatError::VersionMismatch { found, supported } => {
                write!(f, "format version {found} not supported (expected {supported})")
            }
            FormatError::TruncatedPayload { expected, found } => {
                write!(f, "truncated payload: expected {expected} bytes, found {found}")
            }
            FormatError::ChecksumMismatch => write!(f, "payload checksum mismatch"),
            FormatError::BadHeader(m) => write!(f, "bad header: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(String::from("<unknown>"), e)
    }
}

impl From<FormatError> for Error {
    fn from(e: FormatError) -> Self {
        Error::Format(e)
    }
}
