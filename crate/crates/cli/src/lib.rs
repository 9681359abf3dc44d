//! Command-line runner for the device, store/recall, working-memory and
//! associative-memory experiments.
//!
//! Every command writes CSV artifacts and a `manifest.json` into the output
//! directory. The manifest keeps the effective configuration, its SHA-256,
//! the seeds and the hash of every artifact; `vwm replay` reruns it and
//! compares.

pub mod app;
pub mod config;
pub mod experiments;
pub mod manifest;
pub mod sweep;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub use app::{run_cli, Cli};
