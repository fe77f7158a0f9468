//! Small causal decoder: token and position embeddings, residual blocks of
//! multi-head causal attention and a GELU MLP, and a linear head. There are
//! no normalization layers. The attention query and value maps
//! carry LoRA adapters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::{lora_node, LoraConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamGroup, ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    /// Filled in from the tokenizer when the model is built.
    pub vocab_size: usize,
    /// Token width `d'`, shared with the visual tokens.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub context: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            width: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            context: 128,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.width == 0 || self.layers == 0 || self.context == 0 || self.mlp_hidden == 0 {
            return Err(Error::Invalid(format!("degenerate language model config {self:?}")));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

pub const EMBED: &str = "lm.embed";
pub const POSITION: &str = "lm.pos";
pub const HEAD_WEIGHT: &str = "lm.head.weight";
pub const HEAD_BIAS: &str = "lm.head.bias";

pub fn layer_param(layer: usize, what: &str) -> String {
    format!("lm.layer{layer}.{what}")
}

/// Names of the LoRA factors on one adapted projection (`"wq"` or `"wv"`).
pub fn lora_names(layer: usize, target: &str) -> (String, String) {
    (
        layer_param(layer, &format!("{target}.lora_a")),
        layer_param(layer, &format!("{target}.lora_b")),
    )
}

pub const LORA_TARGETS: [&str; 2] = ["wq", "wv"];

pub fn init_params<T: Real>(
    cfg: &ToyLmConfig,
    lora: &LoraConfig,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    lora.check_rank(cfg.width, cfg.width)?;
    let d = cfg.width;
    let lm = ParamGroup::LanguageModel;
    let inv = |n: usize| (1.0 / n as f64).sqrt();
    store.insert_normal(EMBED, lm, &[cfg.vocab_size, d], 1.0, rng)?;
    store.insert_normal(POSITION, lm, &[cfg.context, d], 0.5, rng)?;
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert_normal(&layer_param(l, w), lm, &[d, d], inv(d), rng)?;
        }
        store.insert_normal(&layer_param(l, "w1"), lm, &[d, cfg.mlp_hidden], inv(d), rng)?;
        store.insert_zeros(&layer_param(l, "b1"), lm, &[cfg.mlp_hidden])?;
        store.insert_normal(
            &layer_param(l, "w2"),
            lm,
            &[cfg.mlp_hidden, d],
            inv(cfg.mlp_hidden),
            rng,
        )?;
        store.insert_zeros(&layer_param(l, "b2"), lm, &[d])?;
        for target in LORA_TARGETS {
            let (a, b) = lora_names(l, target);
            store.insert_normal(&a, ParamGroup::Lora, &[lora.rank, d], inv(d), rng)?;
            store.insert_zeros(&b, ParamGroup::Lora, &[d, lora.rank])?;
        }
    }
    store.insert_normal(HEAD_WEIGHT, lm, &[d, cfg.vocab_size], inv(d), rng)?;
    store.insert_zeros(HEAD_BIAS, lm, &[cfg.vocab_size])?;
    Ok(())
}

fn projection<T: Real>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    layer: usize,
    name: &str,
    lora: Option<&LoraConfig>,
) -> Result<NodeId> {
    let w = g.param(&layer_param(layer, name))?;
    match lora {
        Some(cfg) if LORA_TARGETS.contains(&name) => {
            let (an, bn) = lora_names(layer, name);
            let a = g.param(&an)?;
            let b = g.param(&bn)?;
            lora_node(g, x, w, a, b, cfg.scale())
        }
        _ => g.matmul(x, w),
    }
}

/// Logits (`L x V`) for a sequence of input embeddings (`L x d'`).
/// `lora = None` runs the base model.
pub fn forward_node<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ToyLmConfig,
    lora: Option<&LoraConfig>,
    embeddings: NodeId,
) -> Result<NodeId> {
    let (len, width) = g.value(embeddings).ensure_matrix("LM input")?;
    if width != cfg.width {
        return Err(Error::Shape(format!(
            "LM input width {width} differs from model width {}",
            cfg.width
        )));
    }
    if len > cfg.context {
        return Err(Error::Invalid(format!(
            "sequence needs {len} positions but the context holds {}",
            cfg.context
        )));
    }
    let pos_table = g.param(POSITION)?;
    let pos = g.slice_rows(pos_table, 0, len)?;
    let mut x = g.add(embeddings, pos)?;
    let hd = cfg.width / cfg.heads;
    for l in 0..cfg.layers {
        let q = projection(g, x, l, "wq", lora)?;
        let k = projection(g, x, l, "wk", lora)?;
        let v = projection(g, x, l, "wv", lora)?;
        let mixed = if cfg.heads == 1 {
            g.attention(q, k, v, Some(0))?
        } else {
            let mut outs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = g.slice_cols(q, h * hd, hd)?;
                let kh = g.slice_cols(k, h * hd, hd)?;
                let vh = g.slice_cols(v, h * hd, hd)?;
                outs.push(g.attention(qh, kh, vh, Some(0))?);
            }
            g.concat_cols(&outs)?
        };
        let attn = projection(g, mixed, l, "wo", lora)?;
        x = g.add(x, attn)?;
        let w1 = g.param(&layer_param(l, "w1"))?;
        let b1 = g.param(&layer_param(l, "b1"))?;
        let w2 = g.param(&layer_param(l, "w2"))?;
        let b2 = g.param(&layer_param(l, "b2"))?;
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.gelu(h);
        let h = g.linear(h, w2, Some(b2))?;
        x = g.add(x, h)?;
    }
    let w = g.param(HEAD_WEIGHT)?;
    let b = g.param(HEAD_BIAS)?;
    g.linear(x, w, Some(b))
}

pub fn embed_node<T: Real>(g: &mut Graph<'_, T>, ids: &[usize]) -> Result<NodeId> {
    let table = g.param(EMBED)?;
    g.gather(table, ids)
}
