use thiserror::Error;

/// Failure of a CLI run, mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) | CliError::Output(_) => 1,
        }
    }
}

impl From<lograd::Error> for CliError {
    fn from(e: lograd::Error) -> Self {
        use lograd::Error as E;
        match e {
            E::Dimension { .. } | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            E::NonFinite { .. } | E::Numerical { .. } => CliError::Numerical(e.to_string()),
            E::Io(io) => CliError::Io(io),
            E::Format(_) => CliError::Output(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
