use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input (shapes, pixel values, indices, parameters).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("scorer is forward-only; gradients are not available")]
    Capability,

    #[error("baseline still scores {confidence:.4} > epsilon {epsilon} after blurring with sigma {sigma}")]
    BaselineFailure { confidence: f64, epsilon: f64, sigma: f64 },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Training { iteration: usize, loss: f64 },

    #[error("optimization aborted at iteration {iteration}: {reason}")]
    Optimization { iteration: usize, reason: String },

    #[error("grid has {patches} patches; exhaustive search is capped at {cap}")]
    Capacity { patches: usize, cap: usize },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
