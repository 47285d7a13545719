use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload while reading {0}")]
    Truncated(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("feature dimension must be nonzero")]
    ZeroDimension,
    #[error("frame count must be nonzero")]
    ZeroFrames,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("zero variance in feature dimension {0}")]
    ZeroVariance(usize),
    #[error("negative f0 {value} at frame {frame}")]
    NegativeF0 { frame: usize, value: f64 },
    #[error("invalid statistics: {0}")]
    InvalidStats(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown speaker {given:?}; known speakers: {known}")]
    UnknownSpeaker { given: String, known: String },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("model container: {0}")]
    Model(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numeric(_) | Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Config { .. } | Error::Invalid(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Maps an unexpected end of input to [`Error::Truncated`].
    pub(crate) fn from_read(err: std::io::Error, what: &str) -> Self {
        if err.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(err)
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
