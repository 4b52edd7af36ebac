//! IO, file formats, and the experiment CLI around `cait-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod dataset_io;
pub mod export;
pub mod manifest;
pub mod presets;

use std::path::PathBuf;

use cait_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
    #[error("run diverged{}", match .0 { Some(s) => format!(" at step {s}"), None => String::new() })]
    Diverged(Option<usize>),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable exit-code contract: 0 success, 1 numerical
    /// failure/divergence, 2 usage or configuration error.
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Core(core) => match core {
                CoreError::NonFinite { .. } | CoreError::NonFiniteGradient { .. } => 1,
                _ => 2,
            },
            LabError::Diverged(_) | LabError::VerifyFailed(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
