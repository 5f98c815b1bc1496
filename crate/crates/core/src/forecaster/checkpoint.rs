//! JSON checkpoints of weights and optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::AdamState;
use super::{TransformerConfig, TransformerWeights};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TransformerConfig,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<AdamState>,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(weights: &TransformerWeights, optimizer: Option<&AdamState>, epoch: usize) -> Self {
        let tensors = weights
            .layout()
            .tensors
            .iter()
            .map(|spec| NamedTensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                values: weights.values()[spec.range()].to_vec(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: weights.config().clone(),
            tensors,
            optimizer: optimizer.cloned(),
            seed: weights.config().seed,
            epoch,
        }
    }

    /// Rebuilds weights, checking every tensor against the layout.
    pub fn weights(&self) -> Result<TransformerWeights> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidParams(format!(
                "unsupported checkpoint format {}",
                self.format_version
            )));
        }
        let mut weights = TransformerWeights::zeros(&self.config)?;
        let specs = weights.layout().tensors.clone();
        if specs.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, expected {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&self.tensors) {
            if spec.name != t.name || spec.shape != t.shape || t.values.len() != spec.len() {
                return Err(Error::ShapeMismatch(format!("tensor {} does not match layout", t.name)));
            }
            weights.values_mut()[spec.range()].copy_from_slice(&t.values);
        }
        TransformerWeights::from_values(&self.config, weights.values().to_vec())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(checkpoint)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
