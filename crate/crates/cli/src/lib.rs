//! Front end for the `hgfe` binary. Commands return a rendered report and an
//! exit code so they can be driven in-process by tests.

pub mod args;
pub mod commands;
pub mod report;

use hgfe_core::HgfeError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] HgfeError),
    #[error("cannot write report: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(HgfeError::Numeric(_)) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Rendered report plus the exit code the process should end with.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub body: String,
    pub code: u8,
}

pub use commands::run;
