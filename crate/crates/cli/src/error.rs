use std::io::ErrorKind;
use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] deneb::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }

    pub fn missing(path: impl Into<PathBuf>, reason: impl std::fmt::Display) -> Self {
        CliError::MissingInput {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// 0 success, 1 usage/config, 2 missing input, 3 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" | "config" => 1,
            "missing_input" => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingInput { .. } => "missing_input",
            CliError::Core(e) => core_kind(e),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        })
    }
}

fn core_kind(e: &deneb::Error) -> &'static str {
    use deneb::Error as E;
    match e {
        E::Stage { source, .. } => core_kind(source),
        E::File { source, .. } if source.kind() == ErrorKind::NotFound => "missing_input",
        E::InvalidParameter { .. } | E::Unsupported(_) => "config",
        _ => "runtime",
    }
}
