//! A small pre-norm decoder-only transformer over the four-symbol vocabulary,
//! with hand-written reverse-mode gradients, Adam, plateau LR scheduling,
//! activation capture and checkpoints.

mod checkpoint;
mod linalg;
mod optim;
mod prefix;
mod train;
mod transformer;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig, PlateauConfig, PlateauScheduler};
pub use prefix::{forward_prefixes, PrefixForward};
pub use train::{divergence_limit, train, validate, write_metric_csv, MetricLog, MetricRow, ModelState, TrainConfig, TrainHooks};
pub use transformer::{forward, forward_with_activations, loss_and_grads, ActivationSet, LossAndGrads};

pub const VOCAB: usize = 4;
pub const LN_EPS: f64 = 1e-5;
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    /// Maximum sequence length.
    pub context: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig { layers: 4, heads: 4, d_model: 128, d_head: 32, d_mlp: 512, context: 8 }
    }

    pub fn desk() -> Self {
        ModelConfig { layers: 2, heads: 2, d_model: 64, d_head: 32, d_mlp: 256, context: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ModelConfig { layers, heads, d_model, d_head, d_mlp, context } = *self;
        if [layers, heads, d_model, d_head, d_mlp, context].contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if d_model != heads * d_head {
            return Err(Error::Config(format!(
                "d_model {d_model} must equal heads {heads} x d_head {d_head}"
            )));
        }
        Ok(())
    }

    /// Capture point names in forward order.
    pub fn capture_points(&self) -> Vec<String> {
        let mut names = vec!["resid_pre.0".to_string()];
        for l in 0..self.layers {
            names.push(format!("ln1.{l}"));
            names.push(format!("resid_post.{l}"));
        }
        names.push("ln_final".into());
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    /// `[d_model, 3 d_model]`: query, key, value column blocks, heads
    /// contiguous within each block.
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_u: usize,
    pub(crate) b_u: usize,
    groups: Vec<ParamGroup>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.d_mlp;
        let proj = Init::Normal((d as f64).powf(-0.5));
        let mut groups = Vec::new();
        let mut total = 0;
        let mut alloc = |name: String, len: usize, init: Init| {
            let start = total;
            total += len;
            groups.push(ParamGroup { name, range: start..total, init });
            start
        };
        let tok_emb = alloc("tok_emb".into(), VOCAB * d, Init::Normal(EMBED_INIT_STD));
        let pos_emb = alloc("pos_emb".into(), cfg.context * d, Init::Normal(EMBED_INIT_STD));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(LayerOffsets {
                ln1_g: alloc(format!("blocks.{l}.ln1.gain"), d, Init::Const(1.0)),
                ln1_b: alloc(format!("blocks.{l}.ln1.bias"), d, Init::Const(0.0)),
                w_qkv: alloc(format!("blocks.{l}.attn.w_qkv"), d * 3 * d, proj),
                b_qkv: alloc(format!("blocks.{l}.attn.b_qkv"), 3 * d, Init::Const(0.0)),
                w_o: alloc(format!("blocks.{l}.attn.w_o"), d * d, proj),
                b_o: alloc(format!("blocks.{l}.attn.b_o"), d, Init::Const(0.0)),
                ln2_g: alloc(format!("blocks.{l}.ln2.gain"), d, Init::Const(1.0)),
                ln2_b: alloc(format!("blocks.{l}.ln2.bias"), d, Init::Const(0.0)),
                w_in: alloc(format!("blocks.{l}.mlp.w_in"), d * m, proj),
                b_in: alloc(format!("blocks.{l}.mlp.b_in"), m, Init::Const(0.0)),
                w_out: alloc(format!("blocks.{l}.mlp.w_out"), m * d, proj),
                b_out: alloc(format!("blocks.{l}.mlp.b_out"), d, Init::Const(0.0)),
            });
        }
        let lnf_g = alloc("ln_final.gain".into(), d, Init::Const(1.0));
        let lnf_b = alloc("ln_final.bias".into(), d, Init::Const(0.0));
        let w_u = alloc("unembed.w".into(), d * VOCAB, proj);
        let b_u = alloc("unembed.b".into(), VOCAB, Init::Const(0.0));
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_u, b_u, groups, total }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<f64>,
}

impl Model {
    /// Scaled-normal initialization: std `d_model^-1/2` for weight
    /// matrices, [`EMBED_INIT_STD`] for embeddings, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.num_params()];
        for g in layout.groups() {
            match g.init {
                Init::Const(c) => params[g.range.clone()].fill(c),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    for p in &mut params[g.range.clone()] {
                        *p = dist.sample(&mut rng);
                    }
                }
            }
        }
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let need = Layout::new(&config).num_params();
        if params.len() != need {
            return Err(Error::arg(format!(
                "model needs {need} parameters, got {}",
                params.len()
            )));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}
