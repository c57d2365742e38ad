use std::path::PathBuf;

/// Errors produced by the DiffKD library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar or structural argument is outside its valid range.
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    /// A tensor does not have the rank or dimensions an operation expects.
    #[error("shape mismatch in {stage}: {reason}")]
    Shape { stage: &'static str, reason: String },

    /// A timestep or other index is out of bounds.
    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("I/O error on {path}: {source}{hint}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
        hint: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(stage: &'static str, reason: impl Into<String>) -> Self {
        Error::Shape {
            stage,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
            hint: String::new(),
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter { .. } => "parameter",
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyInput(_) => "empty-input",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
        }
    }
}
