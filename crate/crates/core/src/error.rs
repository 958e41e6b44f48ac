use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed MetaImage header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload size mismatch: header declares {expected} bytes, raw file holds {actual}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("unsupported element type `{0}`")]
    UnsupportedElement(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("phantom: {0}")]
    Phantom(String),

    #[error("alignment: {0}")]
    Align(String),

    #[error("registration diverged at iteration {iteration} (level {level}): loss = {loss}")]
    Divergence {
        level: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("mesh is not watertight: {0}")]
    NotWatertight(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("tetrahedralization: {0}")]
    Tetrahedralize(String),

    #[error("mesh warping: {0}")]
    Warp(String),

    #[error("correspondence mismatch: {0}")]
    Correspondence(String),

    #[error("VTK parse error: {0}")]
    Vtk(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed{}: {source}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    Stage {
        stage: String,
        frame: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("missing artifact {path}: {reason}")]
    MissingArtifact { path: PathBuf, reason: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &str, frame: Option<usize>) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            frame,
            source: Box::new(self),
        }
    }
}
