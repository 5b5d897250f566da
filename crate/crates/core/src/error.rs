use thiserror::Error;

/// Errors raised by the mean-field toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument is outside the domain of the operation (bad index, shape
    /// mismatch, non-finite entry, invalid probability vector).
    #[error("domain error: {0}")]
    Domain(String),

    /// A trainer or solver configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// An iterative procedure did not reach its tolerance.
    #[error("{stage} did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence {
        stage: String,
        iterations: usize,
        residual: f64,
    },

    /// A formula's standing assumption is violated, so the formula does not apply.
    #[error("not applicable: {0}")]
    Inapplicable(String),

    /// Estimated quantities contradict declared environment metadata.
    #[error("inconsistent environment metadata: {0}")]
    Inconsistent(String),

    /// An environment description could not be loaded.
    #[error("load error: {0}")]
    Load(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
