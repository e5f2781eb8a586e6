use thiserror::Error;

/// Errors produced by the tracking library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Cholesky factorization failed; `minor` is the 1-based index of the
    /// leading principal minor that was not positive.
    #[error("matrix is not positive definite (leading minor {minor} = {value})")]
    NotPositiveDefinite { minor: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("cannot initialize without a detection")]
    NoDetection,

    #[error("timestamps must be strictly increasing (index {index}: {t} after {prev})")]
    NonMonotoneTime { index: usize, prev: f64, t: f64 },

    #[error("duplicate view `{0}` within one frame")]
    DuplicateView(String),

    #[error("frame time {frame} does not match state time {state}")]
    TimeMismatch { frame: f64, state: f64 },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("tracker never on track: no threshold has a true positive")]
    NeverOnTrack,

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
