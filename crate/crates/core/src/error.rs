use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes of two inputs disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Zero-norm vectors and similar inputs with no meaningful result.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed bytes or text; `offset` is a byte offset for binary inputs
    /// and a line number for text inputs.
    #[error("format error at {unit} {offset}: {reason}")]
    Format {
        unit: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("generation exhausted after {attempts} attempts ({kept} of {requested} samples kept)")]
    GenerationExhausted {
        attempts: usize,
        kept: usize,
        requested: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn at_byte(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            unit: "byte",
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_line(line: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            unit: "line",
            offset: line as u64,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
