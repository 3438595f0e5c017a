//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by any operation in this crate.
#[derive(Debug, Error)]
pub enum DcgnError {
    /// A binary operation received operands with incompatible shapes.
    #[error("shape mismatch: {op} got {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A caller-supplied value violates an operation precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A feature file (or similarity dump) failed structural validation.
    #[error("feature file format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A manifest line failed validation.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A metric has no defined value on the given input.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// A checkpoint could not be loaded into the configured model.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Configuration parsing or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure, tagged with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DcgnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcgnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DcgnError>;
