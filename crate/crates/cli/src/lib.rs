//! The `protonplan` command line: configuration loading, the four
//! subcommands and their CSV/manifest outputs.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::path::PathBuf;

pub use commands::{run_command, Command};
pub use config::{load_config, parse_config, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<String>),
    #[error(transparent)]
    Core(#[from] protonplan::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 validation, 2 runtime, 3 verification failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Core(protonplan::Error::Config(_) | protonplan::Error::Cfl { .. }) => 1,
            CliError::Core(_) | CliError::Io { .. } => 2,
            CliError::Verification(_) => 3,
        }
    }
}
