//! Flat parameter storage with a named tensor layout.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TransformerConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one attention block's tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockOffsets {
    pub w_q: Vec<usize>,
    pub w_k: Vec<usize>,
    pub w_v: Vec<usize>,
    pub merge_w: usize,
    pub merge_b: usize,
    pub norm1_g: usize,
    pub norm1_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub norm2_g: usize,
    pub norm2_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Offsets {
    pub input_w: usize,
    pub input_b: usize,
    pub blocks: Vec<BlockOffsets>,
    pub head1_w: usize,
    pub head1_b: usize,
    pub head2_w: usize,
    pub head2_b: usize,
}

/// Named tensors in storage order plus fast offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) offsets: Offsets,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &TransformerConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
            let spec = TensorSpec {
                name,
                shape,
                offset: total,
                kind,
            };
            total += spec.len();
            let off = spec.offset;
            tensors.push(spec);
            off
        };
        let d = config.d_model;
        let dk = config.d_k();
        let f = config.mlp_hidden;
        let input_w = push("input.weight".into(), vec![config.input_channels(), d], ParamKind::Weight);
        let input_b = push("input.bias".into(), vec![d], ParamKind::Bias);
        let mut blocks = Vec::new();
        for b in 0..config.blocks {
            let mut w_q = Vec::new();
            let mut w_k = Vec::new();
            let mut w_v = Vec::new();
            for h in 0..config.heads {
                w_q.push(push(format!("blocks.{b}.heads.{h}.w_q"), vec![d, dk], ParamKind::Weight));
                w_k.push(push(format!("blocks.{b}.heads.{h}.w_k"), vec![d, dk], ParamKind::Weight));
                w_v.push(push(format!("blocks.{b}.heads.{h}.w_v"), vec![d, dk], ParamKind::Weight));
            }
            let merge_w = push(format!("blocks.{b}.merge.weight"), vec![d, d], ParamKind::Weight);
            let merge_b = push(format!("blocks.{b}.merge.bias"), vec![d], ParamKind::Bias);
            let norm1_g = push(format!("blocks.{b}.norm1.gamma"), vec![d], ParamKind::Gain);
            let norm1_b = push(format!("blocks.{b}.norm1.beta"), vec![d], ParamKind::Bias);
            let ff1_w = push(format!("blocks.{b}.ff1.weight"), vec![d, f], ParamKind::Weight);
            let ff1_b = push(format!("blocks.{b}.ff1.bias"), vec![f], ParamKind::Bias);
            let ff2_w = push(format!("blocks.{b}.ff2.weight"), vec![f, d], ParamKind::Weight);
            let ff2_b = push(format!("blocks.{b}.ff2.bias"), vec![d], ParamKind::Bias);
            let norm2_g = push(format!("blocks.{b}.norm2.gamma"), vec![d], ParamKind::Gain);
            let norm2_b = push(format!("blocks.{b}.norm2.beta"), vec![d], ParamKind::Bias);
            blocks.push(BlockOffsets {
                w_q,
                w_k,
                w_v,
                merge_w,
                merge_b,
                norm1_g,
                norm1_b,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                norm2_g,
                norm2_b,
            });
        }
        let head1_w = push("head.fc1.weight".into(), vec![d, f], ParamKind::Weight);
        let head1_b = push("head.fc1.bias".into(), vec![f], ParamKind::Bias);
        let head2_w = push("head.fc2.weight".into(), vec![f, config.horizon], ParamKind::Weight);
        let head2_b = push("head.fc2.bias".into(), vec![config.horizon], ParamKind::Bias);
        Self {
            tensors,
            offsets: Offsets {
                input_w,
                input_b,
                blocks,
                head1_w,
                head1_b,
                head2_w,
                head2_b,
            },
            total,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// All learnable parameters of the forecaster.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    config: TransformerConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl TransformerWeights {
    /// All-zero parameters (layer-norm gains included).
    pub fn zeros(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let values = vec![0.0; layout.total];
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    /// Weights uniform in (-0.05, 0.05), biases zero, layer-norm gains one.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        Self::init_with_scale(config, seed, 0.05)
    }

    pub fn init_with_scale(config: &TransformerConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &w.layout.tensors {
            let slot = &mut w.values[spec.range()];
            match spec.kind {
                ParamKind::Weight => slot.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale)),
                ParamKind::Bias => slot.fill(0.0),
                ParamKind::Gain => slot.fill(1.0),
            }
        }
        Ok(w)
    }

    pub fn from_values(config: &TransformerConfig, values: Vec<f64>) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        if values.len() != w.values.len() {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", w.values.len(), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("weights"));
        }
        w.values = values;
        Ok(w)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.values[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
