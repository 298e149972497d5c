use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("unknown label `{tag}` on line {line}")]
    Schema { line: usize, tag: String },

    #[error("invalid label scheme: {0}")]
    Scheme(String),

    #[error("embedding file line {line}: {detail}")]
    EmbeddingFormat { line: usize, detail: String },

    #[error("checkpoint error at byte offset {offset}: {detail}")]
    Checkpoint { offset: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("alignment mismatch in sentence {sentence}: {detail}")]
    Alignment { sentence: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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

    /// Failures caused by the numbers themselves rather than by the inputs'
    /// structure.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
