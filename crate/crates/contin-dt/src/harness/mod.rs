//! Experiment orchestration: config files, dataset/checkpoint/report
//! serialization, and the generate/train/report commands.

mod checkpoint;
mod config;
mod dataset_io;
mod run;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, load_into_store,
    save_checkpoint, CheckpointEntry,
};
pub use config::{Method, RunConfig};
pub use dataset_io::{parse_header, parse_trajectory, read_dataset, write_dataset};
pub use run::{cmd_generate, cmd_report, cmd_train, RunSummary};

use crate::dt::DtError;
use crate::metrics::MetricsError;
use crate::numerics::NumericsError;
use std::fmt;

/// Harness-level failure; `exit_code` defines the process status contract:
/// 2 config, 3 numeric, 4 I/O.
#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Io(_) => 4,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "configuration error: {m}"),
            HarnessError::Numeric(m) => write!(f, "numeric failure: {m}"),
            HarnessError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<DtError> for HarnessError {
    fn from(e: DtError) -> Self {
        match e {
            DtError::Numeric(n) => HarnessError::Numeric(n.to_string()),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<NumericsError> for HarnessError {
    fn from(e: NumericsError) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}

impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        HarnessError::Config(e.to_string())
    }
}
