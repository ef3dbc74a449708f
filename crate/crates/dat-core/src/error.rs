use thiserror::Error;

/// Errors surfaced by the tensor kernels, model assembly, and I/O paths.
#[derive(Debug, Error)]
pub enum DatError {
    /// Operand shapes that cannot be combined; reports both sides.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A layer or model configuration violates a structural constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A kernel produced a NaN or infinity; names the step that did.
    #[error("non-finite value produced in {step}")]
    NonFinite { step: String },

    /// Checkpoint contents do not match the model's parameter manifest.
    #[error("checkpoint manifest error: {0}")]
    Manifest(String),

    /// A file could not be decoded (bad magic, truncation, wrong version).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid training data (label range, batch shape).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid argument to an analysis or CLI-facing entry point.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DatError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DatError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, DatError>;
