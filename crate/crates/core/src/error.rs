use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Shape {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss {loss} at step {step} (batch ids: {ids:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f32,
        ids: Vec<String>,
    },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(lhs: &[usize], rhs: &[usize], context: &'static str) -> Self {
        Error::Shape {
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            context,
        }
    }

    /// True for failures caused by input data (missing/undecodable files, bad layouts).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::MissingFile(_) | Error::Image { .. } | Error::Csv(_)
        )
    }
}
