//! Command-line front end for `svyqif`: INI configuration, CSV ingestion,
//! report writers and the four subcommands.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("numeric failure: {0}")]
    Numeric(#[from] svyqif::Error),
}

impl CliError {
    /// 2 for anything the user can fix in the inputs, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}
