use thiserror::Error;

pub type Result<T, E = ZoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ZoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// A loss evaluation produced NaN or an infinity. `seed` is the
    /// perturbation seed that was active, so the failure can be reproduced.
    #[error("non-finite loss ({value}) under perturbation seed {seed:#018x}")]
    NonFiniteLoss { seed: u64, value: f64 },

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("model does not provide an analytic gradient")]
    NoGradient,

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ZoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ZoError::InvalidArgument(msg.into())
    }
}

pub(crate) fn invalid_if(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Err(ZoError::invalid(msg))
    } else {
        Ok(())
    }
}
