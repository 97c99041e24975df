use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("symbol {symbol:?} is not in the tokenizer vocabulary")]
    OutOfVocabulary { symbol: String },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("batch has no response tokens to score")]
    DegenerateBatch,

    #[error("dataset {0:?} is empty")]
    EmptyDataset(String),

    #[error("gradient has zero norm; cosine is undefined")]
    DegenerateGradient,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize, curve: Vec<(usize, f64)> },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Configuration problems are user errors; everything else is a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
