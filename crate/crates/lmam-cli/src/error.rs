use std::process::ExitCode;

/// Process-level error classes. Exit codes: 0 success, 1 validation/usage,
/// 2 numeric failure, 3 acceptance-check failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::Json(_) => ExitCode::from(1),
            CliError::Numeric(_) => ExitCode::from(2),
            CliError::CheckFailed(_) => ExitCode::from(3),
        }
    }
}

impl From<lmam_core::Error> for CliError {
    fn from(err: lmam_core::Error) -> Self {
        match err {
            lmam_core::Error::Numeric(_) => CliError::Numeric(err.to_string()),
            _ => CliError::Usage(err.to_string()),
        }
    }
}
