//! Library side of the `fex` command-line tool: configuration resolution,
//! artifact writing and the subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;

/// Failure classes, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad usage or configuration; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Anything that went wrong while running; exit code 1.
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<fex_core::FexError> for CliError {
    fn from(e: fex_core::FexError) -> Self {
        CliError::Runtime(e.into())
    }
}
