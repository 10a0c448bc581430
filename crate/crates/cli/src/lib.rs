//! Experiment orchestration for the `fedbt` binary: a TOML experiment config,
//! one function per pipeline stage and the comparison-table renderer.
//!
//! Every stage reads its inputs from and writes its artifacts under one output
//! directory, so the stages can run as separate processes.

pub mod commands;
pub mod config;
pub mod layout;
pub mod table;

pub use config::ExperimentConfig;
pub use layout::Layout;

/// A failed subcommand, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(fedbt_core::Error),
    #[error(transparent)]
    Core(fedbt_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}

impl From<fedbt_core::Error> for CliError {
    fn from(e: fedbt_core::Error) -> Self {
        use fedbt_core::Error as E;
        match e {
            e if e.is_numeric() => CliError::Numeric(e),
            E::Format { .. } | E::Io(_) | E::Incompatible(_) => CliError::Data(e.to_string()),
            e => CliError::Core(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
