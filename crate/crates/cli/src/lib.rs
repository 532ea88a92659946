//! The `cmg` command-line workflow: curation, pre-training, training,
//! generation and evaluation over plain TSV files and checkpoints.

pub mod args;
mod commands;

use std::path::{Path, PathBuf};

use cmg_core::{
    ChemError, ConfigError, DecodeError, EvalError, PipelineError, PropertyError, TrainError,
};
use thiserror::Error;

pub use args::{Cli, Command, CommonArgs};
pub use commands::run;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation: exits with status 2.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Property(#[from] PropertyError),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    fn file(path: &Path, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            source: source.into(),
        }
    }
}
