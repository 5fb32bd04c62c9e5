use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("{op}: invalid argument: {details}")]
    InvalidArg { op: &'static str, details: String },

    #[error("label {value} at position {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        value: usize,
        num_classes: usize,
    },

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("unknown parameter: {0}")]
    UnknownParameter(String),

    #[error("parse error at {context}: {details}")]
    Parse { context: String, details: String },

    #[error("format error in {file}: {details}")]
    Format { file: String, details: String },

    #[error("checkpoint fingerprint mismatch: stored {stored}, expected {expected}")]
    FingerprintMismatch { stored: String, expected: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn invalid(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(file: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
