//! Two-phase training, unobserved-region inference and checkpoints.

mod checkpoint;
mod data;
mod infer;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use data::{
    build_view, daily_profile, make_batch, prepare, window_starts, Batch, Dataset, Normaliser, Prepared, View,
    WeatherInputs,
};
pub use infer::{attention_map, forecast_unobserved, forecast_view, infer_unobserved};
pub use model::{ForwardOutput, GenCast, ModelConfig, ModelState, SpatialKind};
pub use optim::Adam;
pub use train::{train, train_prepared, EpochLog, Phase, TrainingLog};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;
use crate::embeddings::EmbeddingError;
use crate::external_signals::SignalError;
use crate::losses::{LossError, LossWeights};
use crate::region_graph::RegionError;
use crate::st_model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("training diverged in {phase} epoch {epoch}: {detail}")]
    DivergenceDetected {
        phase: &'static str,
        epoch: usize,
        detail: String,
    },
    #[error("no precomputed embedding for node {0}")]
    MissingEmbedding(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Everything that shapes a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub tau: f64,
    pub patience: usize,
    /// Caps the optimiser steps per epoch; `None` sweeps every window.
    pub max_batches: Option<usize>,
    /// Windows scored on validation nodes after each epoch.
    pub val_windows: usize,
    pub train_fraction: f64,
    pub q_kk: usize,
    pub q_ku: usize,
    pub idw_k: usize,
    pub idw_power: f64,
    pub use_physics: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            mask_ratio: 0.5,
            seed: 0,
            weights: LossWeights::default(),
            tau: 1.0,
            patience: 20,
            max_batches: None,
            val_windows: 64,
            train_fraction: 0.7,
            q_kk: 3,
            q_ku: 3,
            idw_k: 3,
            idw_power: 2.0,
            use_physics: true,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio == 0.0 {
            return bad("mask_ratio must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.model.horizon > self.model.steps {
            return bad("horizon must not exceed the input steps");
        }
        if self.model.steps == 0 || self.model.horizon == 0 {
            return bad("steps and horizon must be positive");
        }
        Ok(())
    }
}
