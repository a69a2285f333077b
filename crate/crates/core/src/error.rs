use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}")]
    Invalid(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("id {id} at position {position} is outside a table of {rows} rows")]
    IndexOutOfRange { id: usize, position: usize, rows: usize },

    #[error("every target position is padding; nothing to average")]
    EmptyBatch,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("sequence of {len} positions exceeds the limit of {limit}")]
    TooLong { len: usize, limit: usize },

    #[error("unterminated command at byte {offset}")]
    Tokenize { offset: usize },

    #[error("no glyph for symbol `{0}`")]
    UnknownGlyph(String),

    #[error("image {width}x{height} does not fit the largest bucket {max_width}x{max_height}")]
    TooLarge { width: usize, height: usize, max_width: usize, max_height: usize },

    #[error("malformed PGM at byte {offset}: {reason}")]
    Pgm { offset: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
