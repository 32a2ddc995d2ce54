use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fusion library.
#[derive(Debug, Error)]
pub enum MedmixError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("dim mismatch for expert (m={modality}, k={expert}): manifest says {manifest}, file says {file}")]
    DimMismatch { modality: usize, expert: usize, manifest: usize, file: usize },

    #[error("validation error in `{field}`: {detail}")]
    Validation { field: String, detail: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty effective batch: every sample has all modalities missing")]
    EmptyBatch,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema hash mismatch: checkpoint {checkpoint}, dataset {dataset}")]
    SchemaMismatch { checkpoint: String, dataset: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MedmixError {
    pub(crate) fn validation(field: impl Into<String>, detail: impl Into<String>) -> Self {
        MedmixError::Validation { field: field.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MedmixError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = MedmixError> = std::result::Result<T, E>;
