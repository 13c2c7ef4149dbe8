use thiserror::Error;

/// Errors raised by the spreader model, controllers and drivers.
#[derive(Debug, Error)]
pub enum SpreaderError {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}x{expected}, got {got}x{got}")]
    Shape { expected: usize, got: usize },

    #[error("calibration domain error at rpm {rpm}: {reason}")]
    CalibrationDomain { rpm: f64, reason: String },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("infeasible schedule at step {step}: {reason}")]
    InfeasibleSchedule { step: usize, reason: String },

    #[error("numerical failure after {iterations} iterations: {reason}")]
    Numerical { iterations: usize, reason: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, SpreaderError>;

impl SpreaderError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SpreaderError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        SpreaderError::Parse {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
