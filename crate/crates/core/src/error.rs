use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor of shape {shape} needs {expected} values, got {found}")]
    DataLength { shape: Shape, expected: usize, found: usize },

    #[error("{op}: {lhs_name} = {lhs} does not match {rhs_name} = {rhs}")]
    DimMismatch {
        op: &'static str,
        lhs_name: &'static str,
        lhs: usize,
        rhs_name: &'static str,
        rhs: usize,
    },

    #[error("{op}: shape {lhs} does not match shape {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("concat_channels: input {index} has shape {found}, expected N/H/W of {expected}")]
    ConcatMismatch { index: usize, expected: Shape, found: Shape },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("input {height}x{width} is not supported: {requirement}")]
    InputSize { height: usize, width: usize, requirement: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {found}, expected {expected}")]
    ParameterShape { name: String, expected: Shape, found: Shape },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {iter}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss { iter: u64, last_good: Option<PathBuf> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}
