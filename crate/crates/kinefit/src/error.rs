use std::io;
use std::path::{Path, PathBuf};

use kinefit_core::fitting::FitError;
use kinefit_core::gait::GaitError;
use kinefit_core::skeleton::SkeletonError;
use kinefit_core::stats::StatsError;
use kinefit_core::synth::SynthError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Missing, unreadable or malformed input.
    pub const DATA: i32 = 2;
    /// The optimizer produced non-finite values.
    pub const NUMERIC: i32 = 3;
    /// Bad command line.
    pub const USAGE: i32 = 64;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: record {record}: {field}: {msg}", path.display())]
    Record { path: PathBuf, record: usize, field: String, msg: String },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Gait(#[from] GaitError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl ToString) -> Self {
        Self::Format { path: path.to_path_buf(), msg: msg.to_string() }
    }

    pub fn record(path: &Path, record: usize, field: &str, msg: impl ToString) -> Self {
        Self::Record { path: path.to_path_buf(), record, field: field.to_string(), msg: msg.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Fit(FitError::NonFinite { .. }) => exit::NUMERIC,
            Self::Usage(_) => exit::USAGE,
            _ => exit::DATA,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
