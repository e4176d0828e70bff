//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("row {row}: missing column '{column}'")]
    MissingColumn { row: usize, column: String },

    #[error("row {row}: unknown code '{code}' for categorical feature '{feature}'")]
    UnknownCode {
        row: usize,
        feature: String,
        code: String,
    },

    #[error("row {row}: non-numeric value '{value}' for numeric feature '{feature}'")]
    NonNumeric {
        row: usize,
        feature: String,
        value: String,
    },

    #[error("infeasible split: {0}")]
    Split(String),

    #[error("prompt template: {0}")]
    Template(String),

    #[error("answer extraction failed ({reason}); raw text: {raw:?}")]
    Extraction { reason: String, raw: String },

    /// Transport-level backend failure; eligible for retry.
    #[error("backend transport failure: {0}")]
    Transport(String),

    /// Non-retryable backend failure.
    #[error("backend error: {0}")]
    Backend(String),

    #[error("selection rate absent for group '{0}'")]
    MissingRate(String),

    #[error("empty stratum: group '{group}', label {label}")]
    EmptyStratum { group: String, label: u8 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("refinement rejected: {0}")]
    RefinementRejected(String),

    #[error("config error: {0}")]
    Config(String),
}
