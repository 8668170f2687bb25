use std::path::{Path, PathBuf};

use condensegan_core::CoreError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A required input is absent or unreadable.
    #[error("missing input {}: {msg}", path.display())]
    MissingInput { path: PathBuf, msg: String },
    /// An input exists but cannot be decoded.
    #[error("bad input {}: {msg}", path.display())]
    BadInput { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn missing(path: &Path, e: impl std::fmt::Display) -> CliError {
        CliError::MissingInput {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInput { .. } | CliError::BadInput { .. } => 2,
            CliError::Config(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingInput { .. } => "missing-input",
            CliError::BadInput { .. } => "bad-input",
            CliError::Config(_) => "config",
            CliError::Numeric(_) => "numeric",
            CliError::Other(_) => "failure",
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::MissingInput { msg, .. } | CliError::BadInput { msg, .. } => msg.clone(),
            CliError::Config(m) | CliError::Numeric(m) | CliError::Other(m) => m.clone(),
        }
    }

    /// Single-line machine-readable form printed on failure.
    pub fn to_json(&self) -> String {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.message(),
        });
        if let CliError::MissingInput { path, .. } | CliError::BadInput { path, .. } = self {
            v["path"] = json!(path.display().to_string());
        }
        v.to_string()
    }

    /// Attributes a core error to the file it was reading.
    pub fn reading(path: &Path, e: CoreError) -> CliError {
        match e {
            CoreError::Io { source, .. } => CliError::missing(path, source),
            CoreError::Format { .. } | CoreError::Truncated { .. } => CliError::BadInput {
                path: path.to_path_buf(),
                msg: e.to_string(),
            },
            other => other.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => CliError::MissingInput {
                path,
                msg: source.to_string(),
            },
            CoreError::Io { path, source } => CliError::Other(format!("{}: {source}", path.display())),
            other => CliError::Other(other.to_string()),
        }
    }
}
