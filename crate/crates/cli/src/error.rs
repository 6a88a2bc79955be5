//! Command failures and their exit codes.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys, missing paths or out-of-range values.
    #[error("{0}")]
    Config(String),
    /// Input files that are unreadable, malformed or mutually inconsistent.
    #[error("{0}")]
    Data(String),
}

#[derive(Serialize)]
struct Record<'a> {
    error: &'a str,
    message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
        };
        fusekit::canonical::to_canonical_json(&Record {
            error: kind,
            message: self.to_string(),
        })
        .expect("record serializes")
    }
}
