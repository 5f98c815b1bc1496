//! Attention-based all-cause mortality forecaster.
//!
//! A window of `T` days (normalized deaths, normalized meteorology and two
//! positional rows) is projected to `d_model` tokens, passed through
//! post-norm attention blocks, mean-pooled over time and mapped to an
//! `h`-day forecast on the normalized scale.

mod checkpoint;
mod model;
mod params;
mod train;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::METEO_DIMS;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_FORMAT_VERSION};
pub use model::{
    attention_block, forward, forward_cached, gradient, head_values, mse_loss, self_attention, Gradients, Transposed,
    Workspace,
};
pub use params::{Layout, ParamKind, TensorSpec, TransformerWeights};
pub use train::{
    build_sample, predict_horizon, training_samples, train, train_on_samples, AdamState, TrainOutcome,
};

/// Architecture and optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    /// Input window length `T`.
    pub window: usize,
    /// Forecast horizon `h`.
    pub horizon: usize,
    pub meteo_dims: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Samples revisited when fine-tuning from earlier weights.
    pub finetune_scope: FinetuneScope,
}

/// Which samples a yearly fine-tune trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    /// Every sample whose targets precede the cutoff.
    AllHistory,
    /// Only samples with at least one target day after the previous cutoff.
    #[default]
    NewData,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            window: 14,
            horizon: 5,
            meteo_dims: METEO_DIMS,
            d_model: 32,
            blocks: 2,
            heads: 2,
            mlp_hidden: 32,
            lr: 1e-4,
            epochs: 300,
            batch_size: 64,
            seed: 0,
            finetune_scope: FinetuneScope::NewData,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.window == 0 || self.horizon == 0 {
            return bad("window and horizon must be at least 1");
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.mlp_hidden == 0 || self.batch_size == 0 {
            return bad("mlp_hidden and batch_size must be positive");
        }
        if self.meteo_dims != METEO_DIMS {
            return bad("meteo_dims must match the number of meteorological columns");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// Rows of the input matrix: deaths, meteorology and two positional rows.
    pub fn input_channels(&self) -> usize {
        self.meteo_dims + 3
    }
}

/// One training or inference example.
///
/// `input` is channel-major: `input[c * T + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    /// Normalized targets; empty for inference.
    pub target: Vec<f64>,
}

/// Sine and cosine rows, each of length `T`.
pub fn positional_embedding(window: usize) -> [Vec<f64>; 2] {
    let tau = 2.0 * PI / window as f64;
    let sin = (0..window).map(|t| (tau * t as f64).sin()).collect();
    let cos = (0..window).map(|t| (tau * t as f64).cos()).collect();
    [sin, cos]
}
