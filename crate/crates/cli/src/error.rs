use thiserror::Error;

/// Process exit statuses.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] tct_core::Error),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(tct_core::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
