use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on caller-supplied input was not met.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("generation failed after {attempts} attempts: {}", violations.join("; "))]
    Generation { attempts: u32, violations: Vec<String> },

    /// A stage's input directory lacks the previous stage's artifacts.
    #[error("missing upstream artifacts: {0}")]
    Upstream(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("engine error: {0}")]
    Engine(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("stats error: {0}")]
    Stats(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
