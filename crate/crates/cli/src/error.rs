use std::fmt;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(lagkit::Error),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use lagkit::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::InvalidInput(_)) => 2,
            CliError::Core(E::NonFiniteLoss { .. } | E::Integration { .. }) => 3,
            CliError::Core(E::ActuationDeficiency { .. }) => 4,
            CliError::Core(_) | CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lagkit::Error> for CliError {
    fn from(e: lagkit::Error) -> Self {
        CliError::Core(e)
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("i/o error on {}: {e}", path.display()))
}
