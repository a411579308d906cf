//! File formats: checkpoints, run configurations and result tables.

mod checkpoint;
mod config;
mod report;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{
    decode, encode, named_to_state, read_checkpoint, state_to_named, write_checkpoint, MAGIC,
    VERSION,
};
pub use config::{
    load_config, parse_config, BiasName, Lambdas, LossName, OutputsSection, ProblemSection,
    RunConfig, RunConfigFile, TrainSection,
};
pub use report::{csv_header, format_float, parse_trajectory_csv, trajectory_csv, write_json};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint is missing matrix {0}")]
    MissingMatrix(String),
    #[error("malformed table: {0}")]
    Table(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IoError {
    pub(crate) fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
    }
}
