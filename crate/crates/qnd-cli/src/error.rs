use std::fmt;
use std::process::ExitCode;

/// Command failure, split by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or input files. Exit status 2.
    Config(String),
    /// Failure during computation or output. Exit status 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<qnd_core::Error> for CliError {
    fn from(e: qnd_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn io_error(what: &str, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{what}: {e}"))
}
