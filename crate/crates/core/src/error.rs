use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. `kind()` gives a stable machine-readable tag.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read or write {path}: {source}")]
    Ingest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {field}: expected {expected}, found {found}")]
    Format {
        field: String,
        expected: String,
        found: String,
    },

    #[error("record {record} violates {rule}")]
    Validation { record: String, rule: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}`: {detail}")]
    TypeMismatch { key: String, detail: String },

    #[error("missing required setting `{0}`")]
    MissingRequired(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingest { .. } => "IngestError",
            Error::Format { .. } => "FormatError",
            Error::Validation { .. } => "ValidationError",
            Error::Argument(_) => "ArgumentError",
            Error::Numeric(_) => "NumericError",
            Error::Shape { .. } => "ShapeError",
            Error::Training { .. } => "TrainingError",
            Error::UnknownKey(_) => "UnknownKey",
            Error::TypeMismatch { .. } => "TypeMismatch",
            Error::MissingRequired(_) => "MissingRequired",
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Ingest {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        field: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Format {
            field: field.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn validation(record: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Validation {
            record: record.into(),
            rule: rule.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
