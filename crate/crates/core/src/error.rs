use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: String,
        got: String,
    },
    #[error("{op}: {what} ({value}) is not divisible by groups ({groups})")]
    GroupDivisibility {
        op: &'static str,
        what: &'static str,
        value: usize,
        groups: usize,
    },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: input tensor is empty")]
    EmptyTensor { op: &'static str },
    #[error("instance_norm: spatial size {h}x{w} is degenerate (need at least 2 elements)")]
    DegenerateSpatial { h: usize, w: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("spatial underflow: {detail}")]
    SpatialUnderflow { detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in loss term `{term}` at iteration {iteration}")]
    NonFinite { term: String, iteration: u64 },
    #[error("{what}: need at least {need} items, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated file: {0}")]
    Truncated(PathBuf),
    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint schema error: missing tensor `{0}`")]
    MissingKey(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
