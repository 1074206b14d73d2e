use std::path::PathBuf;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("singular schedule: alpha_bar[{t}] = 0")]
    SingularSchedule { t: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("division by zero: {channel} baseline is 0")]
    DivisionByZero { channel: &'static str },

    #[error("degenerate track: no mask available for frame {frame}")]
    DegenerateTrack { frame: usize },

    #[error("validation error: {field}: {message}")]
    Validation { field: String, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
