use thiserror::Error;

/// Errors produced by the reconstruction engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate rotation: quaternion norm {norm:e} is too small")]
    DegenerateRotation { norm: f64 },

    #[error("timestamp {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in frame {frame}: {what}")]
    NonFinite { frame: usize, what: String },

    #[error("correspondence error: {0}")]
    Correspondence(String),

    #[error("empty population for frame {0}")]
    EmptyPopulation(usize),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
