/// Failures mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Schema(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<pionm::Error> for CliError {
    fn from(e: pionm::Error) -> Self {
        match e {
            pionm::Error::Io { .. } => CliError::Io(e.to_string()),
            pionm::Error::Diverged { .. } => CliError::NonConvergence(e.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}
