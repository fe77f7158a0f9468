//! Multi-perspective projector.
//!
//! The deep encoder map queries the concatenated shallow maps, then queries
//! the projected LCA region features (plus a learnable residual `gamma1`),
//! then goes through residual self-attention (`gamma2`) and a two-layer MLP
//! into token space. Attention blocks use bias-free Q/K maps and biased
//! V/output maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamGroup, ParamStore, Real, Tensor};
use crate::region_cropper::REGION_COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppConfig {
    pub shallow_layers: Vec<usize>,
    pub deep_layer: usize,
    /// Encoder channel width `c`.
    pub channels: usize,
    /// Query/key width of every attention block.
    pub attention_dim: usize,
    /// Width `d` of the LCA region features.
    pub local_channels: usize,
    pub mlp_hidden: usize,
    pub token_dim: usize,
    pub gamma1_init: f64,
    pub gamma2_init: f64,
    pub heads: usize,
}

impl Default for MppConfig {
    fn default() -> Self {
        Self {
            shallow_layers: vec![3, 8, 13, 18],
            deep_layer: 23,
            channels: 64,
            attention_dim: 64,
            local_channels: 64,
            mlp_hidden: 64,
            token_dim: 64,
            gamma1_init: 1.0,
            gamma2_init: 1.0,
            heads: 1,
        }
    }
}

impl MppConfig {
    pub fn levels(&self) -> usize {
        self.shallow_layers.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.shallow_layers.is_empty() {
            return Err(Error::Invalid("MPP needs at least one shallow layer".into()));
        }
        if self.shallow_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "shallow layers {:?} must be strictly increasing",
                self.shallow_layers
            )));
        }
        if self.shallow_layers.last().is_some_and(|&l| l >= self.deep_layer) {
            return Err(Error::Invalid(format!(
                "shallow layers {:?} must precede deep layer {}",
                self.shallow_layers, self.deep_layer
            )));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("attention_dim", self.attention_dim),
            ("local_channels", self.local_channels),
            ("mlp_hidden", self.mlp_hidden),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("MPP {name} must be positive")));
            }
        }
        if !self.attention_dim.is_multiple_of(self.heads) || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "{} heads must divide attention_dim {} and channels {}",
                self.heads, self.attention_dim, self.channels
            )));
        }
        if !self.gamma1_init.is_finite() || !self.gamma2_init.is_finite() {
            return Err(Error::Invalid("gamma initial values must be finite".into()));
        }
        Ok(())
    }

    /// Encoder layer indices tapped for the pyramid, shallow first.
    pub fn taps(&self) -> Vec<usize> {
        let mut t = self.shallow_layers.clone();
        t.push(self.deep_layer);
        t
    }
}

/// `L` token-grid feature maps, the last one being the deep map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    maps: Vec<Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(maps: Vec<Tensor<T>>) -> Result<Self> {
        if maps.len() < 2 {
            return Err(Error::Invalid(format!(
                "pyramid needs a deep map and at least one shallow map, got {}",
                maps.len()
            )));
        }
        let (n, c) = maps[0].ensure_matrix("pyramid map")?;
        for (l, m) in maps.iter().enumerate() {
            let s = m.ensure_matrix("pyramid map")?;
            if s != (n, c) {
                return Err(Error::Shape(format!(
                    "pyramid map {l} is {}x{}, expected {n}x{c}",
                    s.0, s.1
                )));
            }
            m.ensure_finite("pyramid map")?;
        }
        Ok(Self { maps })
    }

    pub fn levels(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[Tensor<T>] {
        &self.maps
    }

    pub fn deep(&self) -> &Tensor<T> {
        self.maps.last().expect("non-empty")
    }

    pub fn shallow(&self) -> &[Tensor<T>] {
        &self.maps[..self.maps.len() - 1]
    }

    pub fn tokens(&self) -> usize {
        self.maps[0].rows()
    }

    pub fn channels(&self) -> usize {
        self.maps[0].cols()
    }

    pub fn cast<U: Real>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            maps: self.maps.iter().map(|m| m.cast()).collect(),
        }
    }
}

pub const SHALLOW_BLOCK: &str = "mpp.shallow";
pub const LOCAL_BLOCK: &str = "mpp.local";
pub const SELF_BLOCK: &str = "mpp.self";
pub const LOCAL_PROJ_WEIGHT: &str = "mpp.local_proj.weight";
pub const LOCAL_PROJ_BIAS: &str = "mpp.local_proj.bias";
pub const GAMMA1: &str = "mpp.gamma1";
pub const GAMMA2: &str = "mpp.gamma2";
pub const MLP_W1: &str = "mpp.mlp.w1";
pub const MLP_B1: &str = "mpp.mlp.b1";
pub const MLP_W2: &str = "mpp.mlp.w2";
pub const MLP_B2: &str = "mpp.mlp.b2";

fn block_param(block: &str, name: &str) -> String {
    format!("{block}.{name}")
}

fn init_attention_block<T: Real>(
    cfg: &MppConfig,
    block: &str,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    let (c, a) = (cfg.channels, cfg.attention_dim);
    let std_c = (1.0 / c as f64).sqrt();
    store.insert_normal(&block_param(block, "wq"), ParamGroup::Mpp, &[c, a], std_c, rng)?;
    store.insert_normal(&block_param(block, "wk"), ParamGroup::Mpp, &[c, a], std_c, rng)?;
    store.insert_normal(&block_param(block, "wv"), ParamGroup::Mpp, &[c, c], std_c, rng)?;
    store.insert_zeros(&block_param(block, "bv"), ParamGroup::Mpp, &[c])?;
    store.insert_normal(&block_param(block, "wo"), ParamGroup::Mpp, &[c, c], std_c, rng)?;
    store.insert_zeros(&block_param(block, "bo"), ParamGroup::Mpp, &[c])?;
    Ok(())
}

pub fn init_params<T: Real>(cfg: &MppConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    init_attention_block(cfg, SHALLOW_BLOCK, store, rng)?;
    store.insert_normal(
        LOCAL_PROJ_WEIGHT,
        ParamGroup::Mpp,
        &[cfg.local_channels, cfg.channels],
        (1.0 / cfg.local_channels as f64).sqrt(),
        rng,
    )?;
    store.insert_zeros(LOCAL_PROJ_BIAS, ParamGroup::Mpp, &[cfg.channels])?;
    init_attention_block(cfg, LOCAL_BLOCK, store, rng)?;
    init_attention_block(cfg, SELF_BLOCK, store, rng)?;
    store.insert(GAMMA1, ParamGroup::Mpp, Tensor::scalar(T::of(cfg.gamma1_init)))?;
    store.insert(GAMMA2, ParamGroup::Mpp, Tensor::scalar(T::of(cfg.gamma2_init)))?;
    store.insert_normal(
        MLP_W1,
        ParamGroup::Mpp,
        &[cfg.channels, cfg.mlp_hidden],
        (1.0 / cfg.channels as f64).sqrt(),
        rng,
    )?;
    store.insert_zeros(MLP_B1, ParamGroup::Mpp, &[cfg.mlp_hidden])?;
    store.insert_normal(
        MLP_W2,
        ParamGroup::Mpp,
        &[cfg.mlp_hidden, cfg.token_dim],
        (1.0 / cfg.mlp_hidden as f64).sqrt(),
        rng,
    )?;
    store.insert_zeros(MLP_B2, ParamGroup::Mpp, &[cfg.token_dim])?;
    Ok(())
}

/// Multi-head attention with learned projections: `query` attends over `source`.
pub fn attention_block_node<T: Real>(
    g: &mut Graph<'_, T>,
    block: &str,
    heads: usize,
    query: NodeId,
    source: NodeId,
) -> Result<NodeId> {
    let (_, qc) = g.value(query).ensure_matrix("attention query")?;
    let (_, sc) = g.value(source).ensure_matrix("attention source")?;
    if qc != sc {
        return Err(Error::Shape(format!(
            "{block}: query width {qc} differs from key/value width {sc}"
        )));
    }
    let wq = g.param(&block_param(block, "wq"))?;
    let wk = g.param(&block_param(block, "wk"))?;
    let wv = g.param(&block_param(block, "wv"))?;
    let bv = g.param(&block_param(block, "bv"))?;
    let wo = g.param(&block_param(block, "wo"))?;
    let bo = g.param(&block_param(block, "bo"))?;
    let q = g.linear(query, wq, None)?;
    let k = g.linear(source, wk, None)?;
    let v = g.linear(source, wv, Some(bv))?;
    let mixed = if heads == 1 {
        g.attention(q, k, v, None)?
    } else {
        let qa = g.value(q).cols() / heads;
        let vc = g.value(v).cols() / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * qa, qa)?;
            let kh = g.slice_cols(k, h * qa, qa)?;
            let vh = g.slice_cols(v, h * vc, vc)?;
            outs.push(g.attention(qh, kh, vh, None)?);
        }
        g.concat_cols(&outs)?
    };
    g.linear(mixed, wo, Some(bo))
}

#[derive(Debug, Clone, Copy)]
pub struct MppNodes {
    pub shallow_fuse: NodeId,
    pub local_proj: NodeId,
    pub local_fuse: NodeId,
    pub fuse: NodeId,
    pub vision: NodeId,
}

fn check_rows<T: Real>(g: &Graph<'_, T>, id: NodeId, rows: usize, stage: &str) -> Result<()> {
    let r = g.value(id).rows();
    if r != rows {
        return Err(Error::Shape(format!("{stage} changed token count {rows} -> {r}")));
    }
    Ok(())
}

pub fn fuse_shallow_node<T: Real>(g: &mut Graph<'_, T>, cfg: &MppConfig, maps: &[NodeId]) -> Result<NodeId> {
    let (deep, shallow) = maps
        .split_last()
        .ok_or_else(|| Error::Invalid("empty pyramid".into()))?;
    let f_s = g.concat_rows(shallow)?;
    attention_block_node(g, SHALLOW_BLOCK, cfg.heads, *deep, f_s)
}

pub fn project_local_node<T: Real>(g: &mut Graph<'_, T>, f_attn: NodeId) -> Result<NodeId> {
    let w = g.param(LOCAL_PROJ_WEIGHT)?;
    let b = g.param(LOCAL_PROJ_BIAS)?;
    g.linear(f_attn, w, Some(b))
}

pub fn fuse_local_node<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &MppConfig,
    shallow_fuse: NodeId,
    local_proj: NodeId,
) -> Result<NodeId> {
    let attn = attention_block_node(g, LOCAL_BLOCK, cfg.heads, shallow_fuse, local_proj)?;
    let gamma = g.param(GAMMA1)?;
    let residual = g.scale_by(shallow_fuse, gamma)?;
    g.add(attn, residual)
}

pub fn refine_node<T: Real>(g: &mut Graph<'_, T>, cfg: &MppConfig, local_fuse: NodeId) -> Result<NodeId> {
    let attn = attention_block_node(g, SELF_BLOCK, cfg.heads, local_fuse, local_fuse)?;
    let gamma = g.param(GAMMA2)?;
    let residual = g.scale_by(local_fuse, gamma)?;
    g.add(attn, residual)
}

pub fn to_token_node<T: Real>(g: &mut Graph<'_, T>, fuse: NodeId) -> Result<NodeId> {
    let w1 = g.param(MLP_W1)?;
    let b1 = g.param(MLP_B1)?;
    let w2 = g.param(MLP_W2)?;
    let b2 = g.param(MLP_B2)?;
    let h = g.linear(fuse, w1, Some(b1))?;
    let h = g.gelu(h);
    g.linear(h, w2, Some(b2))
}

pub fn forward_nodes<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &MppConfig,
    maps: &[NodeId],
    f_attn: NodeId,
) -> Result<MppNodes> {
    if maps.len() != cfg.levels() {
        return Err(Error::Shape(format!(
            "pyramid has {} levels, config expects {}",
            maps.len(),
            cfg.levels()
        )));
    }
    let n = g.value(maps[0]).rows();
    let shallow_fuse = fuse_shallow_node(g, cfg, maps)?;
    check_rows(g, shallow_fuse, n, "shallow fusion")?;
    let local_proj = project_local_node(g, f_attn)?;
    let local_fuse = fuse_local_node(g, cfg, shallow_fuse, local_proj)?;
    check_rows(g, local_fuse, n, "local fusion")?;
    let fuse = refine_node(g, cfg, local_fuse)?;
    check_rows(g, fuse, n, "refinement")?;
    let vision = to_token_node(g, fuse)?;
    check_rows(g, vision, n, "token projection")?;
    Ok(MppNodes {
        shallow_fuse,
        local_proj,
        local_fuse,
        fuse,
        vision,
    })
}

fn run<T: Real>(params: &ParamStore<T>, build: impl FnOnce(&mut Graph<'_, T>) -> Result<NodeId>) -> Result<Tensor<T>> {
    let mut g = Graph::new(params);
    let id = build(&mut g)?;
    Ok(g.value(id).clone())
}

fn pyramid_inputs<T: Real>(g: &mut Graph<'_, T>, pyramid: &FeaturePyramid<T>) -> Vec<NodeId> {
    pyramid.maps().iter().map(|m| g.input(m.clone())).collect()
}

/// `CrossAttn(F_L, F_s, F_s)` with `F_s` the row-concatenated shallow maps.
pub fn fuse_shallow<T: Real>(
    pyramid: &FeaturePyramid<T>,
    cfg: &MppConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    run(params, |g| {
        let maps = pyramid_inputs(g, pyramid);
        fuse_shallow_node(g, cfg, &maps)
    })
}

/// `Linear(F_attn)`: sixteen local tokens of width `c`.
pub fn project_local<T: Real>(f_attn: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let (n, _) = f_attn.ensure_matrix("F_attn")?;
    if n != REGION_COUNT {
        return Err(Error::Shape(format!("F_attn must have {REGION_COUNT} rows, got {n}")));
    }
    run(params, |g| {
        let x = g.input(f_attn.clone());
        project_local_node(g, x)
    })
}

/// `CrossAttn(F_shallow_fuse, F'_local, F'_local) + gamma1 * F_shallow_fuse`.
pub fn fuse_local<T: Real>(
    shallow_fuse: &Tensor<T>,
    local_proj: &Tensor<T>,
    cfg: &MppConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    run(params, |g| {
        let a = g.input(shallow_fuse.clone());
        let b = g.input(local_proj.clone());
        fuse_local_node(g, cfg, a, b)
    })
}

/// `SelfAttn(F_local_fuse) + gamma2 * F_local_fuse`.
pub fn refine<T: Real>(local_fuse: &Tensor<T>, cfg: &MppConfig, params: &ParamStore<T>) -> Result<Tensor<T>> {
    local_fuse.ensure_finite("F_local_fuse")?;
    run(params, |g| {
        let a = g.input(local_fuse.clone());
        refine_node(g, cfg, a)
    })
}

/// Two-layer MLP into the token embedding width.
pub fn to_token_space<T: Real>(fuse: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    run(params, |g| {
        let a = g.input(fuse.clone());
        to_token_node(g, a)
    })
}

/// `F_vision`: `N x d'`.
pub fn mpp_forward<T: Real>(
    pyramid: &FeaturePyramid<T>,
    f_attn: &Tensor<T>,
    cfg: &MppConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    run(params, |g| {
        let maps = pyramid_inputs(g, pyramid);
        let fa = g.input(f_attn.clone());
        Ok(forward_nodes(g, cfg, &maps, fa)?.vision)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_layer_order() {
        let cfg = MppConfig {
            shallow_layers: vec![3, 3, 8],
            ..MppConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MppConfig {
            deep_layer: 18,
            ..MppConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_taps() {
        assert_eq!(MppConfig::default().taps(), vec![3, 8, 13, 18, 23]);
        assert_eq!(MppConfig::default().levels(), 5);
    }

    #[test]
    fn pyramid_rejects_mixed_widths() {
        let maps = vec![Tensor::<f64>::zeros(&[9, 8]), Tensor::zeros(&[9, 7])];
        assert!(FeaturePyramid::new(maps).is_err());
    }

    #[test]
    fn heads_must_divide_widths() {
        let cfg = MppConfig {
            heads: 3,
            ..MppConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
