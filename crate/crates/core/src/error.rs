use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed CIFAR-10 file: trailing partial record at byte offset {offset} (length {len} is not a multiple of 3073)")]
    MalformedFile { offset: usize, len: usize },

    #[error("corrupt CIFAR-10 record {index}: label byte {label} is outside 0..=9")]
    CorruptRecord { index: usize, label: u8 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("insufficient points: {points} rows cannot populate {clusters} clusters")]
    InsufficientPoints { points: usize, clusters: usize },

    #[error("cluster {0} is empty; repair empty clusters before computing centroids")]
    EmptyCluster(usize),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss (last good checkpoint: {})",
        last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
