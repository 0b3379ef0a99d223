use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error{}: {cause}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, cause: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid sentence: {0}")]
    InvalidSentence(String),

    #[error("span out of bounds: {0}")]
    SpanOutOfBounds(String),

    #[error("cell encoding conflict: {0}")]
    CellConflict(String),

    #[error("lexicon exhausted: {0}")]
    LexiconExhausted(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sentence of length {len} exceeds encoder maximum {max}")]
    TooLong { len: usize, max: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
