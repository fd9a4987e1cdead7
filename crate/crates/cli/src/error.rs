use qnoise_core::Error as CoreError;
use std::fmt;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, missing files, I/O and other usage errors.
    Config(anyhow::Error),
    /// Numerical aborts: non-finite losses or states, domain violations.
    Numeric(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        CliError::Config(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Numeric(e) => write!(f, "numerical error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Shape { .. } | CoreError::Tape(_) => CliError::Config(e.into()),
            CoreError::Domain { .. } | CoreError::Overflow { .. } | CoreError::NonFinite { .. } | CoreError::Component { .. } => {
                CliError::Numeric(e.into())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Config(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
