//! Training, evaluation, ablation and embedding export.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod runner;
pub mod schedule;

pub use config::{LossConfig, ModelConfig, OptimConfig, RunConfig, Toggles};
pub use model::{ErcModel, WindowObjective};
pub use runner::{
    ablate, ablation_rows, dump_embeddings, evaluate, train, AblationRow, EpochRecord,
};
pub use schedule::lr_at;

use thiserror::Error;

use crate::metrics::MetricsError;
use crate::objectives::ObjectiveError;
use crate::tensor::TensorError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl TrainError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Compatibility(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
            Self::Io { .. } | Self::Internal(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<TextError> for TrainError {
    fn from(e: TextError) -> Self {
        match e {
            TextError::Config(msg) => Self::Config(msg),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Numeric { .. } => Self::Numeric(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<ObjectiveError> for TrainError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Config(msg) => Self::Config(msg),
            ObjectiveError::Tensor(t) => t.into(),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Config(msg) => Self::Config(msg),
            other => Self::Internal(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;
