use ope_lab::OpeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Ope(#[from] OpeError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// `3` for numerical failures, `2` for everything caused by the inputs or the environment.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Ope(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Ope(e) => e.name(),
            CliError::Io(_) => "Io",
            CliError::Csv(_) => "Csv",
            CliError::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
