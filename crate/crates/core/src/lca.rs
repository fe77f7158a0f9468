//! Local clue aggregator: a small conv block per region, projection-free
//! self-attention across the sixteen regions, and a linear map of the
//! flattened result to one token embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::conv_out_extent;
use crate::numerics::{Graph, NodeId, ParamGroup, ParamStore, Real, Tensor};
use crate::region_cropper::{ImageTensor, LocalRegionSet, REGION_COUNT, REGION_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LcaConfig {
    /// Channel count `d` of every conv layer and of each region feature.
    pub channels: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub padding: usize,
    /// Width of the language model's token embeddings.
    pub token_dim: usize,
    /// Apply GELU after the final conv layer as well.
    pub activate_last: bool,
    /// Learned Q/K/V maps in the region attention. Off: Q = K = V = R_local.
    pub learned_projections: bool,
}

impl Default for LcaConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            conv_layers: 4,
            kernel: 3,
            strides: vec![2, 2, 2, 2],
            padding: 1,
            token_dim: 64,
            activate_last: false,
            learned_projections: false,
        }
    }
}

impl LcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.token_dim == 0 || self.kernel == 0 {
            return Err(Error::Invalid("LCA widths and kernel must be positive".into()));
        }
        if self.conv_layers == 0 || self.strides.len() != self.conv_layers {
            return Err(Error::Invalid(format!(
                "LCA needs one stride per conv layer ({} layers, {} strides)",
                self.conv_layers,
                self.strides.len()
            )));
        }
        self.spatial_schedule().map(|_| ())
    }

    /// Spatial extent after each conv layer, starting from the region size.
    pub fn spatial_schedule(&self) -> Result<Vec<usize>> {
        let mut extent = REGION_SIZE;
        let mut out = vec![extent];
        for &s in &self.strides {
            extent = conv_out_extent(extent, self.kernel, s, self.padding)?;
            out.push(extent);
        }
        Ok(out)
    }

    fn conv_in(&self, layer: usize) -> usize {
        if layer == 0 {
            ImageTensor::CHANNELS
        } else {
            self.channels
        }
    }
}

pub fn conv_weight_name(layer: usize) -> String {
    format!("lca.conv{layer}.weight")
}

pub fn conv_bias_name(layer: usize) -> String {
    format!("lca.conv{layer}.bias")
}

pub const PROJ_WEIGHT: &str = "lca.proj.weight";
pub const PROJ_BIAS: &str = "lca.proj.bias";

/// Register LCA parameters in `store`.
pub fn init_params<T: Real>(cfg: &LcaConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.channels;
    let k = cfg.kernel;
    for layer in 0..cfg.conv_layers {
        let cin = cfg.conv_in(layer);
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        store.insert_normal(&conv_weight_name(layer), ParamGroup::Lca, &[k, k, cin, d], std, rng)?;
        store.insert_zeros(&conv_bias_name(layer), ParamGroup::Lca, &[d])?;
    }
    if cfg.learned_projections {
        for name in ["q", "k", "v"] {
            store.insert_normal(
                &format!("lca.attn.{name}"),
                ParamGroup::Lca,
                &[d, d],
                (1.0 / d as f64).sqrt(),
                rng,
            )?;
        }
    }
    let flat = REGION_COUNT * d;
    store.insert_normal(
        PROJ_WEIGHT,
        ParamGroup::Lca,
        &[flat, cfg.token_dim],
        (1.0 / flat as f64).sqrt(),
        rng,
    )?;
    store.insert_zeros(PROJ_BIAS, ParamGroup::Lca, &[cfg.token_dim])?;
    Ok(())
}

pub fn region_tensor<T: Real>(region: &ImageTensor) -> Result<Tensor<T>> {
    Tensor::new(
        vec![region.height(), region.width(), ImageTensor::CHANNELS],
        region.data().iter().map(|&v| T::of(v)).collect(),
    )
}

/// Graph nodes for the LCA outputs.
#[derive(Debug, Clone, Copy)]
pub struct LcaNodes {
    pub r_local: NodeId,
    pub f_attn: NodeId,
    pub f_local: NodeId,
}

/// Stack of per-region features `R_local`, one row per region.
pub fn region_features_node<T: Real>(g: &mut Graph<'_, T>, cfg: &LcaConfig, regions: &[NodeId]) -> Result<NodeId> {
    if regions.len() != REGION_COUNT {
        return Err(Error::Shape(format!(
            "LCA expects {REGION_COUNT} regions, got {}",
            regions.len()
        )));
    }
    let mut rows = Vec::with_capacity(REGION_COUNT);
    for &region in regions {
        let s = g.value(region).shape().to_vec();
        if s != [REGION_SIZE, REGION_SIZE, ImageTensor::CHANNELS] {
            return Err(Error::Shape(format!("region has shape {s:?}, expected 48x48x3")));
        }
        let mut x = region;
        for layer in 0..cfg.conv_layers {
            let w = g.param(&conv_weight_name(layer))?;
            let b = g.param(&conv_bias_name(layer))?;
            x = g.conv2d(x, w, b, cfg.strides[layer], cfg.padding)?;
            if layer + 1 < cfg.conv_layers || cfg.activate_last {
                x = g.gelu(x);
            }
        }
        rows.push(g.avgpool(x)?);
    }
    g.concat_rows(&rows)
}

/// `softmax(R R^T / sqrt(d)) R` (or with learned maps when configured).
pub fn reweight_node<T: Real>(g: &mut Graph<'_, T>, cfg: &LcaConfig, r_local: NodeId) -> Result<NodeId> {
    if cfg.learned_projections {
        let wq = g.param("lca.attn.q")?;
        let wk = g.param("lca.attn.k")?;
        let wv = g.param("lca.attn.v")?;
        let q = g.matmul(r_local, wq)?;
        let k = g.matmul(r_local, wk)?;
        let v = g.matmul(r_local, wv)?;
        g.attention(q, k, v, None)
    } else {
        g.attention(r_local, r_local, r_local, None)
    }
}

/// `Linear(Flatten(F_attn))` as a `1 x d'` row.
pub fn project_node<T: Real>(g: &mut Graph<'_, T>, f_attn: NodeId) -> Result<NodeId> {
    let (rows, cols) = g.value(f_attn).ensure_matrix("F_attn")?;
    let flat = g.reshape(f_attn, &[1, rows * cols])?;
    let w = g.param(PROJ_WEIGHT)?;
    let b = g.param(PROJ_BIAS)?;
    g.linear(flat, w, Some(b))
}

pub fn forward_nodes<T: Real>(g: &mut Graph<'_, T>, cfg: &LcaConfig, regions: &[NodeId]) -> Result<LcaNodes> {
    let r_local = region_features_node(g, cfg, regions)?;
    let f_attn = reweight_node(g, cfg, r_local)?;
    let f_local = project_node(g, f_attn)?;
    Ok(LcaNodes {
        r_local,
        f_attn,
        f_local,
    })
}

pub fn region_inputs<T: Real>(g: &mut Graph<'_, T>, regions: &LocalRegionSet) -> Result<Vec<NodeId>> {
    regions.regions.iter().map(|r| Ok(g.input(region_tensor(r)?))).collect()
}

/// `R_local`: `16 x d`.
pub fn extract_region_features<T: Real>(
    regions: &LocalRegionSet,
    cfg: &LcaConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(params);
    let inputs = region_inputs(&mut g, regions)?;
    let id = region_features_node(&mut g, cfg, &inputs)?;
    Ok(g.value(id).clone())
}

/// `F_attn = softmax(R R^T / sqrt(d)) R` with no learned projections.
pub fn reweight_regions<T: Real>(r_local: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _) = r_local.ensure_matrix("R_local")?;
    if n != REGION_COUNT {
        return Err(Error::Shape(format!("R_local must have {REGION_COUNT} rows, got {n}")));
    }
    r_local.ensure_finite("R_local")?;
    crate::numerics::sdp_attention(r_local, r_local, r_local)
}

/// `F_local`: a vector of length `d'`.
pub fn project_local_token<T: Real>(f_attn: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(params);
    let x = g.input(f_attn.clone());
    let id = project_node(&mut g, x)?;
    let v = g.value(id).clone();
    let n = v.len();
    v.reshape(&[n])
}

/// Returns `(F_attn, F_local)`.
pub fn lca_forward<T: Real>(
    regions: &LocalRegionSet,
    cfg: &LcaConfig,
    params: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new(params);
    let inputs = region_inputs(&mut g, regions)?;
    let nodes = forward_nodes(&mut g, cfg, &inputs)?;
    let f_local = g.value(nodes.f_local).clone();
    let n = f_local.len();
    Ok((g.value(nodes.f_attn).clone(), f_local.reshape(&[n])?))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::region_cropper::crop_regions;

    fn small_cfg() -> LcaConfig {
        LcaConfig {
            channels: 4,
            token_dim: 6,
            ..LcaConfig::default()
        }
    }

    #[test]
    fn default_schedule_reaches_three() {
        assert_eq!(LcaConfig::default().spatial_schedule().unwrap(), vec![48, 24, 12, 6, 3]);
    }

    #[test]
    fn stride_list_must_match_layers() {
        let cfg = LcaConfig {
            strides: vec![2, 2],
            ..LcaConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_small_config() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = ImageTensor::from_fn(20, 24, |y, x, c| ((y + 2 * x + c) % 9) as f64 / 8.0).unwrap();
        let regions = crop_regions(&img).unwrap();
        let (f_attn, f_local) = lca_forward(&regions, &cfg, &store).unwrap();
        assert_eq!(f_attn.shape(), &[16, 4]);
        assert_eq!(f_local.shape(), &[6]);
    }

    #[test]
    fn learned_projection_variant_runs() {
        let cfg = LcaConfig {
            learned_projections: true,
            ..small_cfg()
        };
        let mut store = ParamStore::<f64>::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(store.contains("lca.attn.q"));
        let img = ImageTensor::from_fn(8, 8, |_, x, _| x as f64 / 7.0).unwrap();
        let (f_attn, _) = lca_forward(&crop_regions(&img).unwrap(), &cfg, &store).unwrap();
        assert_eq!(f_attn.shape(), &[16, 4]);
    }

    #[test]
    fn reweight_requires_sixteen_rows() {
        assert!(reweight_regions(&Tensor::<f64>::zeros(&[15, 4])).is_err());
    }
}
