//! Composite training objective, multi-source weighting, AdamW with a
//! warmup/decay schedule, and the teacher-forced training loop.

mod losses;
pub mod ops;
mod optim;
mod step;
mod train;

use thiserror::Error;

pub use losses::{
    combine, flux_loss, kl_sampling_loss, regression_loss, sampling_loss, stop_loss, total_loss, LossParts,
    LossReport, LossWeights, STOP_POSITIVE_WEIGHT,
};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};
pub use step::{
    multi_teacher_loss, normalized_weights, row_forward, weighted_batch, BatchResult, LossSettings, RowNoise,
    RowOutput, TrainingExample,
};
pub use train::{train, StepRecord, TrainConfig, TrainOutcome, TrainRun};

use crate::backbone::BackboneError;
use crate::config::ConfigError;
use crate::corpus::CorpusError;
use crate::nig::NigError;
use crate::numerics::NumericsError;
use crate::sampler::SamplerError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("{}non-finite {component} loss", step.map(|s| format!("step {s}: ")).unwrap_or_default())]
    NonFinite { step: Option<usize>, component: &'static str },
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Nig(#[from] NigError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
