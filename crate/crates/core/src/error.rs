use std::path::PathBuf;

/// Errors produced by the adaptation engine and its file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot normalize a zero vector (norm {norm:e})")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("normalized entropy needs at least two classes, got {0}")]
    SingleClass(usize),

    #[error("class {class} has {count} prompts; ranking needs at least 2")]
    TooFewPrompts { class: usize, count: usize },

    #[error("adjacent embedding count M={members} must satisfy 1 <= M <= K={prompts}")]
    InvalidM { members: usize, prompts: usize },

    #[error("subspace rank n={rank} exceeds min(rows, dim)={limit}")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("SVD did not converge within {0} iterations")]
    SvdFailure(usize),

    #[error("committee is empty")]
    EmptyCommittee,

    #[error("consistency penalty gamma must be >= 1, got {0}")]
    InvalidGamma(f64),

    #[error("class id {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("no labeled predictions")]
    NoLabels,

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("bad magic tag in {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload at byte offset {offset} (expected {expected} bytes total)")]
    TruncatedPayload { offset: u64, expected: u64 },

    #[error("header/payload mismatch: {0}")]
    HeaderPayloadMismatch(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error("malformed log {path} line {line}: {message}")]
    MalformedLog {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
