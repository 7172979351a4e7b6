//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("minmax requires an even channel count, got {0}")]
    OddChannels(usize),

    #[error("parameter {0} was not recorded on the tape")]
    ParamNotOnTape(usize),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported layer for this operation: {0}")]
    UnsupportedLayer(String),

    #[error("power iteration did not converge after {iterations} iterations (last relative change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("lipschitz report is stale: parameter hash {report:016x} does not match network {network:016x}")]
    StaleReport { report: u64, network: u64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    IdxMagic { found: u32, expected: u32 },

    #[error("truncated IDX file {path}: expected {expected} bytes, found {found}")]
    IdxTruncated { path: PathBuf, expected: usize, found: usize },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("materialized operator too large: {dims} input dims exceeds {limit}")]
    OperatorTooLarge { dims: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
