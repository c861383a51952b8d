use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("response column '{0}' not found in header")]
    MissingColumn(String),

    #[error("row {row}, column '{column}': '{value}' is not a finite number")]
    BadCell { row: usize, column: String, value: String },

    #[error("dimension mismatch: expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("not enough data: {0}")]
    TooSmall(String),

    #[error("all importance scores are non-positive; fall back to all features with uniform weights")]
    NoSignal,

    #[error("no co-occurring training points for this query")]
    NoCooccurrence,

    #[error("singular covariance matrix: {0}")]
    Singular(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
}

pub type Result<T> = std::result::Result<T, Error>;
