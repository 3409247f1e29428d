use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the tensor engine, the head and the data generator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("degenerate direction: resultant magnitude {magnitude:e} is below {eps:e}")]
    DegenerateDirection { magnitude: f64, eps: f64 },

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid box geometry: {0}")]
    Geometry(String),

    #[error("shape generation failed: {0}")]
    Generation(String),

    #[error("inconsistent target: {0}")]
    TargetConsistency(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
