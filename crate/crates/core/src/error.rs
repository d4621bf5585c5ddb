use std::path::PathBuf;

use thiserror::Error;
use vitp_autodiff::TensorError;

#[derive(Debug, Error)]
pub enum VitpError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),

    #[error("token id {id} outside vocabulary of {size}")]
    UnknownToken { id: usize, size: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("drop_ratio {0} outside [0, 1)")]
    DropRatio(f64),

    #[error("invalid image: {0}")]
    Image(String),

    #[error("degenerate example: {0}")]
    Degenerate(String),

    #[error("sequence of {len} rows exceeds max_sequence_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("recipe: {0}")]
    Recipe(String),

    #[error("format: {0}")]
    Format(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("training diverged at step {step} (last finite state saved to {checkpoint:?})")]
    Diverged {
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("{0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VitpError>;
