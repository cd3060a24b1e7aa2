use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("backward called without a preceding forward")]
    BackwardWithoutForward,

    #[error("graph has no loss node")]
    NoLossNode,

    #[error("target does not match the loss head of node `{node}`")]
    TargetMismatch { node: String },

    #[error("unknown parameter or scale index {0}")]
    UnknownIndex(usize),

    #[error("bit width must be at least 2, got {0}")]
    InvalidBits(u32),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("model has no quantizers")]
    NoQuantizers,

    #[error("stale gradients: computed at parameter version {computed}, model is at {current}")]
    StaleGradients { computed: u64, current: u64 },

    #[error("gradient disorder needs at least 2 samples, got {0}")]
    WindowTooShort(usize),

    #[error("no disorder tracker registered for scale `{0}`")]
    MissingTracker(String),

    #[error("freeze refresh at step {step} is not allowed: {reason}")]
    RefreshNotDue { step: u64, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing full-precision checkpoint for quantized training")]
    MissingCheckpoint,

    #[error("test-domain sample reached a gradient computation (domain {domain})")]
    Leakage { domain: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("output directory {dir} holds a run with a different config:\n{diff}")]
    ConfigConflict { dir: PathBuf, diff: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidTensor(_)
            | Error::ShapeMismatch { .. }
            | Error::EmptyBatch
            | Error::LabelOutOfRange { .. }
            | Error::BackwardWithoutForward
            | Error::NoLossNode
            | Error::TargetMismatch { .. }
            | Error::UnknownIndex(_) => "graph",
            Error::InvalidBits(_) | Error::NonPositiveScale(_) | Error::NoQuantizers => "quantizer",
            Error::NonFinite(_) => "numeric",
            Error::StaleGradients { .. } => "optimizer",
            Error::WindowTooShort(_) | Error::MissingTracker(_) | Error::RefreshNotDue { .. } => "freeze",
            Error::InvalidArgument(_) => "argument",
            Error::MissingCheckpoint | Error::Leakage { .. } => "harness",
            Error::Config { .. } | Error::ConfigConflict { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
