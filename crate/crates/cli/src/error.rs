use std::fmt;
use std::process::ExitCode;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid arguments or configuration (exit 2).
    Usage(String),
    /// Unreadable inputs, unwritable outputs or missing artifacts (exit 3).
    Io(String),
    /// Non-finite loss during optimization (exit 4).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<inreg_core::Error> for CliError {
    fn from(e: inreg_core::Error) -> Self {
        let message = e.to_string();
        if matches!(e, inreg_core::Error::NonFiniteLoss { .. }) {
            CliError::Numeric(message)
        } else if e.is_io() {
            CliError::Io(message)
        } else {
            CliError::Usage(message)
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
