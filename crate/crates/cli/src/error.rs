use std::fmt::Display;

use thiserror::Error;

/// Command failure, split by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration, detected before any compute.
    #[error("{0}")]
    Validation(String),
    /// Anything that goes wrong once work has started.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub trait Context<T> {
    /// Map the error to [`CliError::Runtime`] with a prefix.
    fn context(self, what: impl Display) -> Result<T, CliError>;
}

impl<T, E: Display> Context<T> for Result<T, E> {
    fn context(self, what: impl Display) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
    }
}
