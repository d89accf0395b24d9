use alloc::string::String;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value violates an invariant. `field` is the dotted
    /// config path (e.g. `train.temperature`).
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Cosine similarity is undefined for a zero vector.
    #[error("latent {index} has zero norm")]
    ZeroNorm { index: usize },

    /// Training produced a non-finite value.
    #[error("training diverged at step {step}: {cause}")]
    Diverged { step: usize, cause: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("autodiff: {0}")]
    Autodiff(String),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs or config.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::ZeroNorm { .. } | Error::Diverged { .. }
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = core::result::Result<T, Error>;
