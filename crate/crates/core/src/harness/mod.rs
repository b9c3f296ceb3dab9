//! Training loop, evaluation suites, checkpoints, episode logs and ablation
//! wiring.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod episode;
pub mod eval;
pub mod exec;
pub mod train;

pub use agent::{Agent, Estimate};
pub use checkpoint::{Checkpoint, Dims};
pub use config::{ablate, ablate_named, AblationFlags, EvalConfig, MixEntry, MixKind, RunConfig, TerrainConfig, Variant};
pub use env::{power_metrics, Env, EnvShared, EpisodeSummary, StepOutcome, TerrainSource};
pub use episode::{record_episode, replay, EpisodeLog, EpisodeRecorder, ReplayReport};
pub use eval::{evaluate, run_batch, run_envs, EpisodeMetrics, EpisodeSpec, EvalBatch, EvalReport, Suite};
pub use exec::Executor;
pub use train::{read_metrics, train, IterationRecord, Trainer};

use crate::estimator::EstimatorError;
use crate::netcore::serial::SerialError;
use crate::netcore::NetError;
use crate::rl::RlError;
use crate::simcore::SimError;
use crate::terrain::TerrainError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("format: {0}")]
    Format(String),
    #[error("layout version mismatch: expected {expected}, got {got}")]
    Version { expected: u32, got: u32 },
    #[error("internal: {0}")]
    Internal(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Serial(#[from] SerialError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

#[cfg(test)]
mod tests;
