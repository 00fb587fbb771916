use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents. `axes` names the offending dimensions.
    #[error("{op}: shape mismatch on {axes}: {detail}")]
    Shape {
        op: &'static str,
        axes: String,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged in stage '{stage}' at epoch {epoch}: loss = {loss}")]
    Diverged {
        stage: String,
        epoch: usize,
        loss: f32,
    },

    #[error("stage '{stage}' accuracy {accuracy:.4} below floor {floor:.4}")]
    BelowFloor {
        stage: String,
        accuracy: f32,
        floor: f32,
    },

    #[error("compile error: {0}")]
    Compile(String),

    #[error("equivalence failure: {0}")]
    Equivalence(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, axes: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axes: axes.into(),
            detail: detail.into(),
        }
    }
}
