use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical blow-up at step {step} (t = {t}): non-finite value in component {component}")]
    BlowUp { step: u64, t: f64, component: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("unsupported functional: {0}")]
    UnsupportedFunctional(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
