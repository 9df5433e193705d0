//! Error type shared by every module.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("index {index} out of range (valid {lo}..={hi})")]
    IndexOutOfRange { index: usize, lo: usize, hi: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("log-SNR undefined at index 0 (sigma = 0)")]
    ZeroSigma,

    #[error("invalid skipping interval k={k} for schedule with N={n}")]
    InvalidK { k: usize, n: usize },

    #[error("solver index order violated: n_to={to} must not exceed n_from={from}")]
    IndexOrder { from: usize, to: usize },

    #[error("embedding dimension must be even, got {0}")]
    OddDim(usize),

    #[error("network is omega-conditioned but no omega was supplied")]
    MissingOmega,

    #[error("network is not omega-conditioned but omega was supplied")]
    UnexpectedOmega,

    #[error("unknown condition class {class} (network has {classes} classes)")]
    UnknownClass { class: usize, classes: usize },

    #[error("missing condition: {0}")]
    MissingCondition(String),

    #[error("forward cache is stale (parameters changed since the forward pass)")]
    StaleCache,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("divergence at iteration {iter}: loss = {loss}")]
    Divergence { iter: u64, loss: f64 },

    #[error("non-finite state: {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config {path}:{line}: {msg}")]
    ConfigParse { path: String, line: usize, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}`: {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("checkpoint schema {found} is newer than supported {supported}")]
    SchemaTooNew { found: u32, supported: u32 },

    #[error("checkpoint truncated")]
    Truncated,

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the error's family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::UnknownKey(_) | Error::ConfigValue { .. } => 2,
            Error::Io { .. } => 3,
            Error::BadMagic
            | Error::SchemaTooNew { .. }
            | Error::Truncated
            | Error::MissingTensor(_)
            | Error::ShapeMismatch(_) => 4,
            Error::Divergence { .. } | Error::NonFinite(_) => 5,
            _ => 6,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
