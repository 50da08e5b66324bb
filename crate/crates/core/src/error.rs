use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error(
        "non-finite loss at iteration {iteration} \
         (batch mean {batch_mean}, min {batch_min}, max {batch_max})"
    )]
    NonFiniteLoss {
        iteration: u64,
        batch_mean: f64,
        batch_min: f64,
        batch_max: f64,
    },

    #[error("latent search diverged at step {step}: loss {loss}")]
    SearchDiverged { step: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn shape(expected: impl core::fmt::Display, actual: impl core::fmt::Display) -> Self {
        use alloc::string::ToString;
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
