use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("matrix is singular{}", frequency.map(|f| format!(" at frequency bin {f}")).unwrap_or_default())]
    Singular { frequency: Option<usize> },
    #[error("input too short: {samples} samples, need at least {required}")]
    InputTooShort { samples: usize, required: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("target speaker {speaker} has no active frame in the batch window")]
    EmptyTarget { speaker: String },
    #[error("target mask is all zero; beamformer statistics are degenerate")]
    DegenerateStats,
    #[error("mixture spec error: {0}")]
    Spec(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("pipeline error: {0}")]
    Pipeline(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn wav(path: impl Into<PathBuf>, source: hound::Error) -> Self {
        Error::Wav {
            path: path.into(),
            source,
        }
    }

    /// Attach a frequency index to a singularity error.
    pub fn at_frequency(self, f: usize) -> Self {
        match self {
            Error::Singular { .. } => Error::Singular { frequency: Some(f) },
            other => other,
        }
    }
}
