use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate field: max ({max}) must exceed min ({min})")]
    DegenerateField { min: f64, max: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("training failed at {stage} {index}: {detail}")]
    TrainingFailure {
        stage: &'static str,
        index: usize,
        detail: String,
    },

    #[error("parameter {name} = {value} outside support [{lo}, {hi}]")]
    OutOfSupport {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("ill-conditioned interpolation: centers {i} and {j} coincide with conflicting values")]
    Conditioning { i: usize, j: usize },

    #[error("schema violation in {file}: {detail}")]
    Schema { file: PathBuf, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
