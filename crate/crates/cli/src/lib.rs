//! Pipeline commands and the retrieval service behind the `hierlens` binary.

pub mod commands;
pub mod config;
pub mod server;

use std::fmt;

use hierlens_core::Error;

/// Error carrying the process exit code: 2 for bad input (validation
/// failures, missing or malformed files), 1 for runtime failures.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFiniteLoss { .. } => 1,
            Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 1,
            _ => 2,
        };
        let mut message = e.to_string();
        if let Error::Annotations { diagnostics, .. } = &e {
            for d in diagnostics.iter().skip(1).take(20) {
                message.push_str(&format!("\n  {d}"));
            }
        }
        CliError { code, message }
    }
}
