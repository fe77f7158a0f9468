//! Visual encoder seam and a deterministic linear stub.
//!
//! Any encoder that yields `L` maps of `N x c` tokens (shallow taps first,
//! deep tap last) can implement [`VisualEncoder`]. The stub averages each
//! patch of a `g x g` grid, lifts the three channel means to `c` channels
//! with a fixed random projection, and mixes each tap with its own fixed
//! orthogonal matrix so the levels differ.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpp::FeaturePyramid;
use crate::numerics::Tensor;
use crate::region_cropper::ImageTensor;

pub trait VisualEncoder {
    fn encode(&self, image: &ImageTensor) -> Result<FeaturePyramid<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    /// Patch grid side `g`; each map has `g * g` tokens.
    pub grid: usize,
    pub channels: usize,
    pub total_layers: usize,
    /// Tapped layer indices, strictly increasing; the last is the deep map.
    pub taps: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            grid: 3,
            channels: 64,
            total_layers: 24,
            taps: vec![3, 8, 13, 18, 23],
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.channels == 0 {
            return Err(Error::Invalid("encoder grid and channels must be positive".into()));
        }
        if self.taps.len() < 2 {
            return Err(Error::Invalid("encoder needs at least two taps".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "encoder taps {:?} must be strictly increasing",
                self.taps
            )));
        }
        if self.taps.last().is_some_and(|&t| t >= self.total_layers) {
            return Err(Error::Invalid(format!(
                "tap {} outside {} encoder layers",
                self.taps.last().unwrap(),
                self.total_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StubEncoder {
    spec: EncoderSpec,
    lift: Tensor<f64>,
    mixing: Vec<Tensor<f64>>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormalize the columns of a square Gaussian matrix (Gram-Schmidt).
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let a = gaussian_matrix(n, n, rng);
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a[i * n + j]).collect()).collect();
        let mut ok = true;
        for j in 0..n {
            for p in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[p]).map(|(x, y)| x * y).sum();
                let prev = cols[p].clone();
                for (x, y) in cols[j].iter_mut().zip(&prev) {
                    *x -= dot * y;
                }
            }
            let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            let mut data = vec![0.0; n * n];
            for (j, col) in cols.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    data[i * n + j] = v;
                }
            }
            return Tensor::matrix(n, n, data).expect("square");
        }
    }
}

impl StubEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let c = spec.channels;
        let scale = (1.0 / 3.0f64).sqrt();
        let lift = Tensor::matrix(
            3,
            c,
            gaussian_matrix(3, c, &mut rng).into_iter().map(|v| v * scale).collect(),
        )?;
        let mixing = spec
            .taps
            .iter()
            .map(|&tap| {
                let mut tap_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9_7f4a_7c15 ^ tap as u64));
                random_orthogonal(c, &mut tap_rng)
            })
            .collect();
        Ok(Self { spec, lift, mixing })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// `g*g x 3` matrix of per-patch channel means.
    pub fn patch_means(&self, image: &ImageTensor) -> Result<Tensor<f64>> {
        let g = self.spec.grid;
        let (h, w) = (image.height(), image.width());
        if h < g || w < g {
            return Err(Error::Invalid(format!(
                "{h}x{w} image is smaller than the {g}x{g} patch grid"
            )));
        }
        let mut data = Vec::with_capacity(g * g * 3);
        for py in 0..g {
            let (y0, y1) = (py * h / g, (py + 1) * h / g);
            for px in 0..g {
                let (x0, x1) = (px * w / g, (px + 1) * w / g);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += image.pixel(y, x, c);
                        }
                    }
                    data.push(s / count);
                }
            }
        }
        Tensor::matrix(g * g, 3, data)
    }
}

impl VisualEncoder for StubEncoder {
    fn encode(&self, image: &ImageTensor) -> Result<FeaturePyramid<f64>> {
        let lifted = self.patch_means(image)?.matmul(&self.lift)?;
        let maps = self
            .mixing
            .iter()
            .map(|m| lifted.matmul(m))
            .collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(maps)
    }
}

pub fn encode(image: &ImageTensor, spec: &EncoderSpec) -> Result<FeaturePyramid<f64>> {
    StubEncoder::new(spec.clone())?.encode(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_matrices_are_orthogonal() {
        let enc = StubEncoder::new(EncoderSpec {
            channels: 6,
            ..EncoderSpec::default()
        })
        .unwrap();
        for m in &enc.mixing {
            let mtm = m.transpose().unwrap().matmul(m).unwrap();
            assert!(mtm.max_abs_diff(&Tensor::identity(6)) < 1e-12);
        }
    }

    #[test]
    fn rejects_image_smaller_than_grid() {
        let spec = EncoderSpec {
            grid: 5,
            channels: 4,
            ..EncoderSpec::default()
        };
        let img = ImageTensor::new(4, 4, vec![0.2; 48]).unwrap();
        assert!(encode(&img, &spec).is_err());
    }

    #[test]
    fn rejects_unsorted_taps() {
        let spec = EncoderSpec {
            taps: vec![3, 8, 8, 23],
            ..EncoderSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
