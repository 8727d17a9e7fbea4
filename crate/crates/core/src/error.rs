use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: i64, num_classes: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
