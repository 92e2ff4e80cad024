use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum MmrError {
    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("manifest error in {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (seed {seed})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        seed: u64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl MmrError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        MmrError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        MmrError::Shape(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MmrError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            MmrError::NotFound(_) => "not_found",
            MmrError::Manifest { .. } => "manifest",
            MmrError::Config { .. } => "config",
            MmrError::Shape(_) => "shape",
            MmrError::WeightsUnavailable(_) => "weights_unavailable",
            MmrError::UndefinedMetric(_) => "undefined_metric",
            MmrError::NonFiniteLoss { .. } => "non_finite_loss",
            MmrError::Io { .. } => "io",
            MmrError::Image(_) => "image",
            MmrError::Tensor(_) => "tensor",
            MmrError::Json(_) => "json",
            MmrError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, MmrError>;
