use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric contract was violated (non-finite values, degenerate scales).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("divergence in stage {stage} at step {step}: loss is not finite")]
    Divergence { stage: &'static str, step: usize },

    /// Dataset construction or ingestion failure.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file is malformed, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
