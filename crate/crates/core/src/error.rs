use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("train split is empty: {0}")]
    EmptyTrain(PathBuf),

    #[error("unknown entity id {0}")]
    UnknownEntityId(usize),

    #[error("unknown relation id {0}")]
    UnknownRelationId(usize),

    #[error("unknown entities: {}", .0.join(", "))]
    UnknownEntities(Vec<String>),

    #[error("embedding file: {0}")]
    EmbeddingFormat(String),

    #[error("embedding file names entity {0:?} which is not in the graph")]
    EmbeddingUnknownEntity(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("cannot evaluate an empty split")]
    EmptySplit,

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
