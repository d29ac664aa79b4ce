//! Decoder-only transformer: pre-norm residual blocks with RMS normalization,
//! rotary positions, GELU MLPs and untied embeddings.
//!
//! Parameters live in one flat `Vec<Tensor>` in a fixed order (see
//! [`ParamSlot`]); the inference path in [`forward`] and the training graph
//! in [`graph`] both index into it.

mod checkpoint;
pub mod forward;
pub mod graph;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{ActivationCache, PatchSet, ResidualAddition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: crate::tasks::VOCAB_SIZE,
            max_seq_len: 128,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("n_layers and n_heads must be >= 1".into());
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head() % 2 != 0 {
            return bad(format!("d_head {} must be even for rotary encoding", self.d_head()));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("d_ff, vocab_size and max_seq_len must be >= 1".into());
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 1.0) {
            return bad("norm_eps must be > 0 and rope_base > 1".into());
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        param_shapes(self)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Attention head address, rendered `layer.head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.head >= config.n_heads {
            return Err(LabError::PatchOutOfRange(format!(
                "head {self} outside {}x{} grid",
                config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }

    /// All heads in (layer, head) order.
    pub fn all(config: &ModelConfig) -> Vec<HeadId> {
        (0..config.n_layers)
            .flat_map(|l| (0..config.n_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let (l, h) = s
            .split_once('.')
            .ok_or_else(|| LabError::PatchOutOfRange(format!("bad head id `{s}`")))?;
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| LabError::PatchOutOfRange(format!("bad head id `{s}`")))
        };
        Ok(HeadId::new(parse(l)?, parse(h)?))
    }
}

/// Per-layer parameter slots, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    AttnNorm,
    Wq,
    Wk,
    Wv,
    Wo,
    MlpNorm,
    WIn,
    WOut,
}

const LAYER_SLOTS: [ParamSlot; 8] = [
    ParamSlot::AttnNorm,
    ParamSlot::Wq,
    ParamSlot::Wk,
    ParamSlot::Wv,
    ParamSlot::Wo,
    ParamSlot::MlpNorm,
    ParamSlot::WIn,
    ParamSlot::WOut,
];

impl ParamSlot {
    fn name(self) -> &'static str {
        match self {
            ParamSlot::AttnNorm => "attn_norm",
            ParamSlot::Wq => "wq",
            ParamSlot::Wk => "wk",
            ParamSlot::Wv => "wv",
            ParamSlot::Wo => "wo",
            ParamSlot::MlpNorm => "mlp_norm",
            ParamSlot::WIn => "w_in",
            ParamSlot::WOut => "w_out",
        }
    }
}

pub const TOKEN_EMBED: usize = 0;

pub fn layer_param(layer: usize, slot: ParamSlot) -> usize {
    let pos = LAYER_SLOTS.iter().position(|&s| s == slot).expect("slot listed");
    1 + layer * LAYER_SLOTS.len() + pos
}

pub fn final_norm_index(config: &ModelConfig) -> usize {
    1 + config.n_layers * LAYER_SLOTS.len()
}

pub fn unembed_index(config: &ModelConfig) -> usize {
    final_norm_index(config) + 1
}

/// Names and shapes of every parameter in storage order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut out = vec![("tok_embed".to_string(), vec![v, d])];
    for l in 0..config.n_layers {
        for slot in LAYER_SLOTS {
            let shape = match slot {
                ParamSlot::AttnNorm | ParamSlot::MlpNorm => vec![d],
                ParamSlot::Wq | ParamSlot::Wk | ParamSlot::Wv | ParamSlot::Wo => vec![d, d],
                ParamSlot::WIn => vec![d, ff],
                ParamSlot::WOut => vec![ff, d],
            };
            out.push((format!("layers.{l}.{}", slot.name()), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, v]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    /// Free-form JSON carried in the checkpoint header (the trainer stores
    /// its config here).
    pub metadata: Option<serde_json::Value>,
}

/// Seeded initialization: N(0, 0.02) everywhere, output projections scaled by
/// `1/sqrt(2L)`, normalization gains at 1.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = 0.02f32;
    let out_std = std / (2.0 * config.n_layers as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("valid std");
    let out_normal = Normal::new(0.0f32, out_std).expect("valid std");
    let params = param_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with("norm") {
                vec![1.0; n]
            } else if name.ends_with(".wo") || name.ends_with(".w_out") {
                (0..n).map(|_| out_normal.sample(&mut rng)).collect()
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: config.clone(),
        params,
        metadata: None,
    })
}

impl Model {
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.len() != params.len() {
            return Err(LabError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(LabError::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: p.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            params,
            metadata: None,
        })
    }

    pub fn layer(&self, layer: usize, slot: ParamSlot) -> &Tensor {
        &self.params[layer_param(layer, slot)]
    }

    pub fn layer_mut(&mut self, layer: usize, slot: ParamSlot) -> &mut Tensor {
        &mut self.params[layer_param(layer, slot)]
    }

    pub fn heads(&self) -> Vec<HeadId> {
        HeadId::all(&self.config)
    }
}
