//! CLI error type with machine-parsable categories. Every failure exits
//! nonzero and prints a single `error: <category>: <message>` line.

use msloc_core::checkpoint::CheckpointError;
use msloc_core::geom::GeomError;
use msloc_core::metrics::MetricsError;
use msloc_core::model::ModelError;
use msloc_core::sim::SimError;
use msloc_core::train::TrainError;

use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(#[from] SimError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Pose(#[from] GeomError),
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Train(_) => "train",
            CliError::Model(_) => "model",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Pose(_) => "pose",
            CliError::Metrics(_) => "metrics",
            CliError::Io(_) => "io",
            CliError::Usage(_) => "usage",
        }
    }
}
