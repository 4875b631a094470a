use std::fmt;

use motionauth::CoreError;

/// Failure classes, each with its own process exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let text = e.to_string();
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::Data(m) => CliError::Data(m),
            CoreError::Shape(_) => CliError::Config(text),
            CoreError::File { .. } | CoreError::Io { .. } | CoreError::Checkpoint(_) => CliError::Data(text),
            CoreError::Training(_) | CoreError::Evaluation(_) | CoreError::Numeric(_) | CoreError::Nn(_) => {
                CliError::Numeric(text)
            }
        }
    }
}
