use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite function value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },
    #[error("no domains")]
    NoDomains,
    #[error("invalid partition policy: {0}")]
    InvalidPolicy(String),
    #[error("domain {domain} outside [0, {domains})")]
    DomainOutOfRange { domain: usize, domains: usize },
    #[error("domain {0} has no samples in the batch")]
    MissingDomain(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch-hard triplet: {0}")]
    TripletPrecondition(String),
    #[error("domain {domain}: {reason}")]
    InsufficientData { domain: usize, reason: String },
    #[error("query identity {0} absent from gallery")]
    QueryNotInGallery(usize),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid config at {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
