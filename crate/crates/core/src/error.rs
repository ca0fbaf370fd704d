use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing class directory `{class}` under {root}")]
    MissingClassDir { class: String, root: PathBuf },

    #[error("cannot read image {path}: {reason}")]
    ImageRead { path: PathBuf, reason: String },

    #[error("class `{0}` has fewer than 2 samples")]
    ClassTooSmall(String),

    #[error("target {target} is below the existing count {count} of class `{class}`")]
    TargetBelowCount { class: String, count: usize, target: usize },

    #[error("unknown token(s) in prompt: {0}")]
    UnknownTokens(String),

    #[error("token `{0}` is already registered")]
    DuplicateToken(String),

    #[error("token `{0}` is not registered")]
    UnregisteredToken(String),

    #[error("token `{0}` does not appear in any training prompt")]
    TokenNotInPrompts(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("rank {rank} too large for `{target}` with shape {rows}x{cols}")]
    RankTooLarge { target: String, rank: usize, rows: usize, cols: usize },

    #[error("no LoRA adapters attached")]
    NoAdapters,

    #[error("missing class `{0}` in training split")]
    MissingClass(String),

    #[error("features missing for image key `{0}`")]
    MissingFeature(String),

    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("bad container file: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
