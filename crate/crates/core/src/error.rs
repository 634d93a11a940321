use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid sensitivity profile: {0}")]
    Profile(String),

    #[error("backprop state does not match the network: {0}")]
    State(String),

    #[error("layer {layer} ({kind}) does not support this operation")]
    UnsupportedLayer { layer: usize, kind: &'static str },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("at least two samples are required, got {0}")]
    InsufficientSamples(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("fit diverged at iteration {iteration}")]
    FitDivergence { iteration: usize },

    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unsupported model format version {0}")]
    Version(u32),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
