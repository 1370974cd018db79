use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exhaustive enumeration needs effective dimension <= 2, got {0}")]
    UnsupportedMode(usize),

    #[error("arrangement kind mismatch: expected {expected}, got {got}")]
    ArrangementKind { expected: String, got: String },

    #[error("non-real Fourier output: imaginary residue {0:.3e}")]
    NonReal(f64),

    #[error("factorization violates cone constraint by {0:.3e}")]
    ConeViolation(f64),

    #[error("activation pattern missing from arrangement set (group {group}): {pattern}")]
    PatternMiss { group: usize, pattern: String },

    #[error("gram partition inconsistent: |G[{k},{l}]| = {value:.3e} crosses parts")]
    Partition { k: usize, l: usize, value: f64 },

    #[error("solver diverged at iteration {iter}")]
    Divergence { iter: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
