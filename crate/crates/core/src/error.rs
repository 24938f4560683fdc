use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GckmError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate bandwidth: input has zero variance")]
    DegenerateBandwidth,

    #[error("rank deficient for requested width: requested {requested}, numerically positive eigenvalues {available}")]
    RankDeficient { requested: usize, available: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("singular system (reciprocal condition estimate {rcond:e})")]
    Singular { rcond: f64 },

    #[error("degenerate weighting; perturb lambda1 or lambda2 ({0})")]
    DegenerateWeighting(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<GckmError>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<GckmError>,
    },

    #[error("model file: {0}")]
    Model(String),
}

impl GckmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GckmError::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        GckmError::Config { field: field.into(), msg: msg.into() }
    }

    pub(crate) fn in_layer(self, layer: usize) -> Self {
        GckmError::Layer { layer, source: Box::new(self) }
    }

    pub(crate) fn in_iteration(self, iteration: usize) -> Self {
        GckmError::Iteration { iteration, source: Box::new(self) }
    }

    /// Coarse classification used by the CLI to choose an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            GckmError::Io { .. } => ErrorKind::Io,
            GckmError::Parse { .. } | GckmError::Dataset(_) | GckmError::Config { .. } => ErrorKind::Config,
            GckmError::Layer { source, .. } | GckmError::Iteration { source, .. } => source.kind(),
            GckmError::Model(_) => ErrorKind::Io,
            _ => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

pub type Result<T> = std::result::Result<T, GckmError>;
