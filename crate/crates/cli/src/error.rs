use std::path::Path;

/// Failures surfaced by the CLI, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 2 = config, 3 = data, 4 = numeric, 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<mfcl_core::Error> for CliError {
    fn from(e: mfcl_core::Error) -> Self {
        match e {
            mfcl_core::Error::Config { .. } => CliError::Config(e.to_string()),
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
