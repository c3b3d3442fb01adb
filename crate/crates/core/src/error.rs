use std::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum MahaError {
    /// Incompatible matrix/tensor dimensions. The message names the shapes involved.
    Shape(String),
    /// Invalid configuration value (kernel size, schedule depth, ratio, ...).
    Config(String),
    /// A computation produced NaN or Inf. `stage` names the pipeline stage.
    NonFinite { stage: String },
    /// Training loss exceeded the divergence bound or became non-finite.
    Diverged { step: usize, loss: f64 },
}

impl fmt::Display for MahaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(msg) => write!(f, "shape error: {msg}"),
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::NonFinite { stage } => write!(f, "non-finite value at stage: {stage}"),
            Self::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss = {loss})")
            }
        }
    }
}

impl std::error::Error for MahaError {}

pub type Result<T> = std::result::Result<T, MahaError>;
