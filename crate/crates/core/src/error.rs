use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("class {class_id} has a degenerate centroid (mean norm {norm:e} below 1e-12)")]
    DegenerateCentroid { class_id: usize, norm: f64 },

    #[error("KL divergence is infinite: p[{index}] = 0 while q[{index}] = {q:e}")]
    DivergentKl { index: usize, q: f64 },

    #[error("row {row} has near-zero norm {norm:e} and cannot be normalized")]
    ZeroNorm { row: usize, norm: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("anchor {anchor} has no positive partner view")]
    MissingPositive { anchor: usize },

    #[error("anchor {anchor} has no other sample of its class")]
    NoPositive { anchor: usize },

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("class {class_id} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class_id: usize,
        available: usize,
        requested: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize, loss: f64 },

    #[error("step {step} (epoch {epoch}): {source}")]
    AtStep {
        step: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
