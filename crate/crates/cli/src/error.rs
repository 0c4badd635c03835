use std::fmt;

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or dataset layout. Exit code 2.
    Usage(String),
    /// Training or gradient checks went numerically wrong. Exit code 3.
    Numeric(String),
    /// A checkpoint or image file is corrupt or does not fit the model. Exit code 4.
    Artifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Artifact(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Artifact(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<csamoe::Error> for CliError {
    fn from(e: csamoe::Error) -> Self {
        use csamoe::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFinite { .. } | E::MissingGrad(_) | E::Dimension(_) => CliError::Numeric(msg),
            E::Codec { .. } => CliError::Artifact(msg),
            E::Usage(_) | E::Dataset(_) | E::Io(_) => CliError::Usage(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
