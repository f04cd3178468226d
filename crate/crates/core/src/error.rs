use std::path::PathBuf;

/// Errors produced by the protopad toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feature table row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("feature table row {row}: expected {expected} features, found {found}")]
    RowDimension {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("feature table row {row}: duplicate sample_id `{sample_id}`")]
    DuplicateSample { row: usize, sample_id: String },
    #[error("feature table header: {0}")]
    Header(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("class {0} has no support vectors")]
    EmptyClass(usize),
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("metric {0} is not supported for training")]
    UnsupportedMetric(&'static str),
    #[error("empty score population: {0}")]
    EmptyPopulation(&'static str),
    #[error("invalid score {0}: scores must be finite and within [0, 1]")]
    InvalidScore(f64),
    #[error("checkpoint section `{section}`: {message}")]
    Checkpoint { section: String, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            section: section.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
