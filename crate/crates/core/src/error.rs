use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("constant modality {modality}: intensity normalization would divide by zero")]
    ConstantModality { modality: String },

    #[error("tumor does not fit inside grid: {0}")]
    TumorDoesNotFit(String),

    #[error("volume too shallow for δ={delta}: depth {depth} < {required}")]
    TooShallow {
        depth: usize,
        delta: usize,
        required: usize,
    },

    #[error("no foreground for prompt")]
    NoForeground,

    #[error("no box with coverage in [{lo:.2}, {hi:.2}] found after {attempts} attempts")]
    CoverageNotReached { lo: f64, hi: f64, attempts: usize },

    #[error("payload size mismatch for {path}: expected {expected} bytes, found {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unknown parameter {0}: its group is not covered by any freeze plan")]
    UnknownParameter(String),

    #[error("non-finite loss {loss} at step {step} ({phase}); last finite loss {last_finite:?}")]
    NonFiniteLoss {
        step: usize,
        phase: String,
        loss: f64,
        last_finite: Option<f64>,
    },

    #[error("missing phase-1 checkpoint: {0}")]
    MissingPhaseOne(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
}
