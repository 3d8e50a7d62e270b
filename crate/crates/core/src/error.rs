use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid bit width {bits}: {reason}")]
    InvalidBits { bits: u32, reason: &'static str },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("value {value} at index {index} lies outside the scheme range [{min}, {max}]")]
    OutOfRange {
        index: usize,
        value: String,
        min: i64,
        max: i64,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file ({reason})")]
    Truncated { path: PathBuf, reason: String },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} out of range 0..=9 at record {index}")]
    BadLabel { index: usize, label: u8 },

    #[error("slot vector mismatch: {0}")]
    SlotMismatch(String),

    #[error("{len} values do not fit into {slots} slots")]
    TooManyValues { len: usize, slots: usize },

    #[error("no batching primes available: {0}")]
    NoPrimes(String),

    #[error("plaintext space too small: product of moduli has {have} bits, network needs {need}")]
    ModulusTooSmall { have: u64, need: u32 },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
