use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A special function was called outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid distribution parameters (non-PD scale, non-positive shape, ...).
    #[error("invalid parameters: {0}")]
    Param(String),

    /// Malformed or insufficient input data.
    #[error("input error: {0}")]
    Input(String),

    /// Starting values could not be computed from the data.
    #[error("initialization failed: {0}")]
    Init(String),

    /// A conditional maximization step produced no usable update.
    #[error("degenerate step: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
