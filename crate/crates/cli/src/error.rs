use std::fmt;

use maha_core::MahaError;

/// Stable exit-code contract: 0 success, 1 check failure, 2 config error,
/// 3 runtime divergence.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    CheckFailed(String),
    Divergence { step: usize },
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Divergence { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::CheckFailed(msg) => write!(f, "check failed: {msg}"),
            CliError::Divergence { step } => write!(f, "training diverged at step {step}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<MahaError> for CliError {
    fn from(e: MahaError) -> Self {
        match e {
            MahaError::Diverged { step, .. } => CliError::Divergence { step },
            MahaError::NonFinite { .. } => CliError::Divergence { step: 0 },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
