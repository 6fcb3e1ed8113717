use dice_core::DiceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("numeric error: {0}")]
    Numeric(#[from] DiceError),
}

impl CliError {
    /// 1 for configuration, 2 for IO, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }
}

/// Errors raised while validating parameters are configuration errors, not
/// numeric ones.
pub(crate) fn invalid(err: DiceError) -> CliError {
    CliError::Config(err.to_string())
}

pub type CliResult<T> = std::result::Result<T, CliError>;
