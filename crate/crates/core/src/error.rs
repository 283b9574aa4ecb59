use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("normal field has no foreground pixels")]
    EmptyForeground,
    #[error("invalid thresholds: t_hi ({t_hi}) must exceed t_lo ({t_lo})")]
    InvalidThreshold { t_hi: u8, t_lo: u8 },
    #[error("invalid keep probability {0}: must lie in (0, 1]")]
    InvalidProbability(f64),
    #[error("invalid shape spec: {0}")]
    InvalidShape(String),
    #[error("shape does not fit inside the {size}x{size} frame with a 2 px margin")]
    OutOfFrame { size: u32 },
    #[error("normal map has no foreground, cannot extract a sketch")]
    EmptySketch,
    #[error("dataset spec list is empty")]
    EmptySpecList,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("failed to load pair {id}: {reason}")]
    Load { id: String, reason: String },
    #[error("missing generated images for method {method}: {}", ids.join(", "))]
    MissingGenerated { method: String, ids: Vec<String> },
    #[error("non-finite loss at iteration {iteration} (batch ids: {})", batch_ids.join(", "))]
    NonFinite { iteration: usize, batch_ids: Vec<String> },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
