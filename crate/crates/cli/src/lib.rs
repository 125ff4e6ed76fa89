//! `tspf` command-line runner: config parsing, the `run`/`tune`/`report`/
//! `synth` subcommands, and result files.

use std::path::PathBuf;

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{report, run, synth, tune, RunSummary};
pub use config::{DatasetConfig, DatasetName, ExperimentConfig, TuneConfig};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// The file is not valid TOML or does not match the schema.
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    /// Well-formed but semantically invalid config value.
    #[error("{path}: line {line}: `{key}` {msg}")]
    Invalid {
        path: PathBuf,
        line: usize,
        key: String,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("plot {path}: {msg}")]
    Plot { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] tspf_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
