use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `rank`, giving a unit scale.
    pub alpha: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: None }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn scale(&self) -> f64 {
        self.alpha() / self.rank as f64
    }

    pub fn check_rank(&self, d_in: usize, d_out: usize) -> Result<()> {
        check_rank(self.rank, d_in, d_out)
    }
}

fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Invalid(format!(
            "LoRA rank {rank} must be in 1..={} for a {d_in}x{d_out} layer",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// Low-rank update of one linear layer: `A` is `r x d_in`, `B` is `d_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>, alpha: f64) -> Result<Self> {
        let (r, d_in) = a.ensure_matrix("LoRA A")?;
        let (d_out, rb) = b.ensure_matrix("LoRA B")?;
        if r != rb {
            return Err(Error::Shape(format!("LoRA A has rank {r}, B has rank {rb}")));
        }
        check_rank(r, d_in, d_out)?;
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(alpha / r) * B A`, the dense weight delta as `d_out x d_in`.
    pub fn dense_delta(&self) -> Result<Tensor<T>> {
        let s = T::of(self.alpha / self.rank() as f64);
        Ok(self.b.matmul(&self.a)?.scale(s))
    }
}

/// `x W + (alpha / r) (x A^T) B^T + bias`, never forming the dense delta.
pub fn lora_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    adapter: &LoraAdapter<T>,
) -> Result<Tensor<T>> {
    let (_, d_in) = x.ensure_matrix("LoRA input")?;
    let (wr, d_out) = weight.ensure_matrix("LoRA base weight")?;
    if wr != d_in || adapter.a.cols() != d_in || adapter.b.rows() != d_out {
        return Err(Error::Shape(format!(
            "LoRA shapes disagree: input width {d_in}, weight {wr}x{d_out}, A {:?}, B {:?}",
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    let s = T::of(adapter.alpha / adapter.rank() as f64);
    let low = x.matmul(&adapter.a.transpose()?)?.matmul(&adapter.b.transpose()?)?;
    let mut y = x.matmul(weight)?.add(&low.scale(s))?;
    if let Some(b) = bias {
        crate::numerics::ops::add_row_bias(&mut y, b)?;
    }
    Ok(y)
}

/// Graph version of [`lora_forward`] without bias.
pub fn lora_node<T: Real>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    weight: NodeId,
    a: NodeId,
    b: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let base = g.matmul(x, weight)?;
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let xa = g.matmul(x, at)?;
    let low = g.matmul(xa, bt)?;
    let low = g.scale(low, T::of(scale));
    g.add(base, low)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_b_is_base_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(3, 5, &mut rng);
        let w = random(5, 4, &mut rng);
        let adapter = LoraAdapter::new(random(2, 5, &mut rng), Tensor::zeros(&[4, 2]), 2.0).unwrap();
        assert_eq!(lora_forward(&x, &w, None, &adapter).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn rank_bounds() {
        assert!(LoraAdapter::<f64>::new(Tensor::zeros(&[5, 4]), Tensor::zeros(&[6, 5]), 1.0).is_err());
        assert!(LoraAdapter::<f64>::new(Tensor::zeros(&[4, 4]), Tensor::zeros(&[6, 4]), 1.0).is_ok());
        assert!(LoraConfig { rank: 0, alpha: None }.check_rank(4, 4).is_err());
    }
}
