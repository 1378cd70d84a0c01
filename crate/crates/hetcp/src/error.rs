use std::path::{Path, PathBuf};

use serde::Serialize;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit status of each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Io => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, thiserror::Error, Serialize)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numeric,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.kind.exit_code()
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind, "exit_code": self.exit_code(), "message": self.message } }).to_string()
    }
}

impl From<hetcp_core::Error> for CliError {
    fn from(e: hetcp_core::Error) -> Self {
        use hetcp_core::Error as E;
        let kind = match &e {
            E::FrozenUpdate(_)
            | E::NonFinite { .. }
            | E::NonFiniteLoss { .. }
            | E::MissingGrad(_)
            | E::NonDeterministic
            | E::GraphConsumed
            | E::NonScalarLoss(_)
            | E::NoPositives(_) => ErrorKind::Numeric,
            _ => ErrorKind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

/// Adds the offending path to IO errors.
pub trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| CliError::io(&path.into(), e))
    }
}
