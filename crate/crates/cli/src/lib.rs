//! Library surface of the command-line tool: run configuration and the
//! binary file formats, shared with the integration tests.

pub mod config;
pub mod io;

use waveformer::error::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Check(String),
}
