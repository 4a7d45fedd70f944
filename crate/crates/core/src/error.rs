use std::path::PathBuf;

use thiserror::Error;

use crate::objective::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] mfgan_autodiff::Error),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("{context}: expected dimension {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("maximizer found on the grid boundary (half width {half_width}); widen the grid")]
    WidenGrid { half_width: f64 },

    #[error(
        "non-finite loss (interior {}, terminal {}, initial {}, total {})",
        .0.interior, .0.terminal, .0.initial, .0.total
    )]
    NonFiniteLoss(LossBreakdown),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("training aborted at step {step}; last good checkpoint: {last_good}")]
    TrainingAborted {
        step: u64,
        last_good: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("config: {0}")]
    Config(String),

    #[error("missing dataset: {0}")]
    MissingDataset(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in command-line error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Autodiff(_) => "autodiff",
            Error::InvalidSpec(_) => "spec",
            Error::Dimension { .. } => "dimension",
            Error::Precondition(_) => "precondition",
            Error::Domain(_) => "domain",
            Error::Unsupported(_) => "unsupported",
            Error::WidenGrid { .. } => "widen_grid",
            Error::NonFiniteLoss(_) | Error::TrainingAborted { .. } => "non_finite_loss",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Checkpoint(_) => "checkpoint",
            Error::Idx(_) => "dataset",
            Error::NotPositiveDefinite | Error::NotSymmetric(_) => "matrix",
            Error::Io { .. } => "io",
            Error::UnknownKey { .. } | Error::Config(_) => "config",
            Error::MissingDataset(_) => "missing_dataset",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated checkpoint: expected {expected} bytes of parameters, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),
    #[error("checkpoint holds {found} but {expected} was expected")]
    SpecMismatch { expected: String, found: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum IdxError {
    #[error("wrong IDX magic {found:#010x} (expected {expected:#010x})")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated IDX file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("images must be 28x28, found {rows}x{cols}")]
    BadDims { rows: usize, cols: usize },
}
