//! File formats, scenario loading and batch runners around `cxlsim-core`.

pub mod config;
pub mod input;
pub mod output;
pub mod sweep;

use std::path::PathBuf;

use thiserror::Error;

use cxlsim_core::engine::SimError;
use cxlsim_core::scenario::ConfigError;
use cxlsim_core::traces::{SpecError, TraceError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Schema { path: PathBuf, msg: String },
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("workload: {0}")]
    Workload(#[from] SpecError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit status. Clap's own usage errors exit with 2 as well.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Schema { .. } | CliError::Config(_) => 4,
            CliError::Trace { .. } | CliError::Workload(_) => 5,
            CliError::Sim(_) => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Schema { .. } => "schema",
            CliError::Config(_) => "config",
            CliError::Trace { .. } => "trace",
            CliError::Workload(_) => "workload",
            CliError::Sim(_) => "simulation",
        }
    }

    /// `error[kind]: message` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string();
        let flat: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error[{}]: {}", self.kind(), flat.join(" "))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
