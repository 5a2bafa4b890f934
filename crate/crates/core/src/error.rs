use std::path::PathBuf;

/// Errors raised anywhere in the separation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on axis {axis} in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("input too short: {got} samples, need at least {min}")]
    TooShort { got: usize, min: usize },

    #[error("insufficient samples: {got} rows, need at least {min}")]
    InsufficientSamples { got: usize, min: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: requested {requested} sources, bank holds {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("reference signal is all zeros")]
    ZeroReference,

    #[error("source {0} has zero power")]
    ZeroPower(usize),

    #[error("no sources detected in mixture")]
    NoSource,

    #[error("source count mismatch: {sources} references vs {estimates} estimates")]
    CountMismatch { sources: usize, estimates: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("wav format error: {field} is {got}, expected {expected}")]
    WavFormat {
        field: &'static str,
        got: String,
        expected: String,
    },

    #[error("wav parse error in {path}: {source}")]
    WavParse {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
