use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{context}: matrix must be square, got {rows}x{cols}")]
    NotSquare {
        context: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{context}: matrix must have at least one row and one column")]
    EmptyMatrix { context: &'static str },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate draw: {0}")]
    Degenerate(String),

    #[error("irreducible risk is only defined for a Markov system; the spec carries a direct X1 -> Y term")]
    MarkovViolationPresent,

    #[error("constant actuals: r-squared is undefined")]
    ConstantActuals,

    #[error("{path}: row {row}, column `{column}`: {reason}")]
    Csv {
        path: String,
        row: usize,
        column: String,
        reason: String,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    CsvLib(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NotSquare { .. } => "not_square",
            Error::EmptyMatrix { .. } => "empty_matrix",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Degenerate(_) => "degenerate",
            Error::MarkovViolationPresent => "markov_violation_present",
            Error::ConstantActuals => "constant_actuals",
            Error::Csv { .. } => "csv",
            Error::Schema(_) => "schema",
            Error::UnknownPreset { .. } => "unknown_preset",
            Error::UnknownEstimator(_) => "unknown_estimator",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::CsvLib(_) => "csv",
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
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
