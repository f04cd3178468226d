//! Experiment runner for the `protopad` command.
//!
//! Every subcommand reads one [`config::RunConfig`] document, derives all
//! randomness from its seeds, and writes only below the configured output
//! directory.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_det_export, cmd_eval, cmd_extend, cmd_gen_data, cmd_train, prepare, Prepared, RetrainMode,
};
pub use config::RunConfig;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<protopad::Error> for CliError {
    fn from(e: protopad::Error) -> Self {
        use protopad::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidSpec(_) | E::UnsupportedMetric(_) => CliError::Config(msg),
            E::Numerical(_) | E::ZeroVector | E::InvalidScore(_) => CliError::Numerical(msg),
            _ => CliError::Data(msg),
        }
    }
}
