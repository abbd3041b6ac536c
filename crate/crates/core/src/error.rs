use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GaiaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("edge references unknown node `{0}`")]
    DanglingEdge(String),
    #[error("node `{id}` has negative GMV {value} at position {pos}")]
    NegativeGmv { id: String, pos: usize, value: f64 },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown edge {0} -> {1}")]
    UnknownEdge(String, String),
    #[error("series of length {len} exceeds T_max={t_max}")]
    SeriesTooLong { len: usize, t_max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("empty node set")]
    EmptyNodeSet,
}

impl GaiaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GaiaError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = GaiaError> = std::result::Result<T, E>;
