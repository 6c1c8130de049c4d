use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmimError>;

#[derive(Debug, Error)]
pub enum CmimError {
    #[error("empty sample")]
    EmptySample,

    #[error("non-finite score in sample")]
    NonFiniteScore,

    #[error("cannot form marginal pairs from {0} sample(s)")]
    CannotPair(usize),

    #[error("insufficient batch for marginals: {0} sample(s)")]
    InsufficientBatch(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty sequence after masking")]
    EmptySequence,

    #[error("token id {token} outside vocabulary of size {vocab}")]
    OutOfVocabulary { token: usize, vocab: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("unknown modality '{0}'")]
    UnknownModality(String),

    #[error("empty manifest")]
    EmptyManifest,

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt checkpoint at byte offset {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("non-finite loss component '{component}' at epoch {epoch}, step {step}")]
    NonFinite {
        component: String,
        epoch: usize,
        step: usize,
    },

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CmimError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CmimError::InvalidArgument(msg.into())
    }

    /// Process exit code for this error: 1 for I/O, 2 for configuration or
    /// usage problems, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmimError::Io(_) | CmimError::Image(_) | CmimError::Checkpoint { .. } => 1,
            CmimError::NonFinite { .. } | CmimError::NonFiniteScore => 3,
            _ => 2,
        }
    }
}
