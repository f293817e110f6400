use thiserror::Error;

/// Errors raised by the training and evaluation primitives.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("trace does not match the parameters or network it is replayed against")]
    StaleTrace,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("deterministic policy (eta = 0): transition log-probability is undefined")]
    DeterministicPolicy,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("checkpoint: truncated file")]
    Truncated,

    #[error("checkpoint: malformed record: {0}")]
    Malformed(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
