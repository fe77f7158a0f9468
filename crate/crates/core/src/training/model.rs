use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::{self, ToyLmConfig};
use super::lora::LoraConfig;
use super::tokenizer::{Tokenizer, EOS_ID, SEP_ID};
use crate::encoder::{EncoderSpec, StubEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::lca::{self, LcaConfig};
use crate::mpp::{self, FeaturePyramid, MppConfig};
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};
use crate::region_cropper::{crop_regions, ImageTensor, LocalRegionSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub lca: LcaConfig,
    pub mpp: MppConfig,
    pub lm: ToyLmConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    /// A small configuration that trains in seconds on a CPU.
    pub fn tiny() -> Self {
        let width = 32;
        let channels = 8;
        Self {
            encoder: EncoderSpec {
                channels: 16,
                ..EncoderSpec::default()
            },
            lca: LcaConfig {
                channels,
                token_dim: width,
                ..LcaConfig::default()
            },
            mpp: MppConfig {
                channels: 16,
                attention_dim: 16,
                local_channels: channels,
                mlp_hidden: 32,
                token_dim: width,
                ..MppConfig::default()
            },
            lm: ToyLmConfig {
                width,
                layers: 2,
                heads: 2,
                mlp_hidden: 64,
                context: 96,
                vocab_size: 0,
            },
            lora: LoraConfig { rank: 8, alpha: None },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lca.validate()?;
        self.mpp.validate()?;
        self.lm.validate()?;
        self.lora.check_rank(self.lm.width, self.lm.width)?;
        let width = self.lm.width;
        if self.lca.token_dim != width || self.mpp.token_dim != width {
            return Err(Error::Invalid(format!(
                "token widths differ: LCA {}, MPP {}, language model {width}",
                self.lca.token_dim, self.mpp.token_dim
            )));
        }
        if self.mpp.channels != self.encoder.channels {
            return Err(Error::Invalid(format!(
                "projector expects {} encoder channels, encoder gives {}",
                self.mpp.channels, self.encoder.channels
            )));
        }
        if self.mpp.local_channels != self.lca.channels {
            return Err(Error::Invalid(format!(
                "projector expects {} local channels, LCA gives {}",
                self.mpp.local_channels, self.lca.channels
            )));
        }
        if self.mpp.taps() != self.encoder.taps {
            return Err(Error::Invalid(format!(
                "projector taps {:?} differ from encoder taps {:?}",
                self.mpp.taps(),
                self.encoder.taps
            )));
        }
        Ok(())
    }
}

/// Frozen-encoder outputs and local crops for one image, computed once.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub pyramid: FeaturePyramid<f64>,
    pub regions: LocalRegionSet,
}

/// Positions of one teacher-forced sequence
/// `[visual tokens; local token; instruction; response]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub visual: usize,
    pub instruction: usize,
    /// Response tokens including the closing end token.
    pub response: usize,
}

impl SequenceLayout {
    pub fn prefix_len(&self) -> usize {
        self.visual + 1 + self.instruction
    }

    /// The final response token is only ever a target, never an input.
    pub fn input_len(&self) -> usize {
        self.prefix_len() + self.response.saturating_sub(1)
    }

    /// Positions whose next-token prediction is a response token.
    pub fn loss_positions(&self) -> std::ops::Range<usize> {
        let start = self.prefix_len() - 1;
        start..start + self.response
    }

    pub fn mask(&self) -> Vec<bool> {
        let span = self.loss_positions();
        (0..self.input_len()).map(|p| span.contains(&p)).collect()
    }

    /// Target ids per input position; unmasked positions get 0.
    pub fn targets(&self, response_ids: &[usize]) -> Vec<usize> {
        let span = self.loss_positions();
        (0..self.input_len())
            .map(|p| {
                if span.contains(&p) {
                    response_ids[p - span.start]
                } else {
                    0
                }
            })
            .collect()
    }
}

/// `[F_vision rows; F_local; instruction rows]`.
pub fn assemble_tokens(
    f_vision: &Tensor<f64>,
    f_local: &Tensor<f64>,
    instruction: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let (_, d) = f_vision.ensure_matrix("F_vision")?;
    if f_local.len() != d {
        return Err(Error::Shape(format!(
            "F_local has {} entries, expected {d}",
            f_local.len()
        )));
    }
    let local = f_local.clone().reshape(&[1, d])?;
    let mut parts = vec![f_vision, &local];
    if !instruction.is_empty() {
        let (_, w) = instruction.ensure_matrix("instruction embeddings")?;
        if w != d {
            return Err(Error::Shape(format!(
                "instruction width {w} differs from token width {d}"
            )));
        }
        parts.push(instruction);
    }
    Tensor::concat_rows(&parts)
}

/// Encoder stub, LCA, MPP, language model and LoRA adapters with one
/// parameter store, plus the vocabulary.
#[derive(Debug, Clone)]
pub struct FeallmModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore<f64>,
    encoder: StubEncoder,
}

impl FeallmModel {
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.lm.vocab_size = tokenizer.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        lca::init_params(&config.lca, &mut params, &mut rng)?;
        mpp::init_params(&config.mpp, &mut params, &mut rng)?;
        lm::init_params(&config.lm, &config.lora, &mut params, &mut rng)?;
        let encoder = StubEncoder::new(config.encoder.clone())?;
        Ok(Self {
            config,
            tokenizer,
            params,
            encoder,
        })
    }

    /// Reassemble from stored parts (checkpoint loading).
    pub fn from_parts(config: ModelConfig, tokenizer: Tokenizer, params: ParamStore<f64>) -> Result<Self> {
        config.validate()?;
        if config.lm.vocab_size != tokenizer.len() {
            return Err(Error::Invalid(format!(
                "config vocabulary size {} differs from stored vocabulary of {}",
                config.lm.vocab_size,
                tokenizer.len()
            )));
        }
        let reference = Self::new(config.clone(), tokenizer.clone(), 0)?;
        for p in reference.params.iter() {
            let stored = params.get(&p.name)?;
            if stored.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    stored.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Invalid(format!(
                "stored {} tensors, model has {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Self {
            encoder: reference.encoder,
            config,
            tokenizer,
            params,
        })
    }

    pub fn prepare(&self, image: &ImageTensor) -> Result<PreparedImage> {
        Ok(PreparedImage {
            pyramid: self.encoder.encode(image)?,
            regions: crop_regions(image)?,
        })
    }

    /// Question ids followed by the separator.
    pub fn instruction_ids(&self, question: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.encode(question);
        ids.push(SEP_ID);
        ids
    }

    /// Answer ids followed by the end token. Unknown words are rejected.
    pub fn response_ids(&self, answer: &str) -> Result<Vec<usize>> {
        let mut ids = self.tokenizer.encode_strict(answer)?;
        ids.push(EOS_ID);
        Ok(ids)
    }

    pub fn layout(&self, instruction: usize, response: usize) -> SequenceLayout {
        SequenceLayout {
            visual: self.config.encoder.tokens(),
            instruction,
            response,
        }
    }

    /// Embeddings of `[F_vision; F_local; instruction]` as a graph node.
    pub fn prefix_node(&self, g: &mut Graph<'_, f64>, image: &PreparedImage, instruction: &[usize]) -> Result<NodeId> {
        let regions = lca::region_inputs(g, &image.regions)?;
        let local = lca::forward_nodes(g, &self.config.lca, &regions)?;
        let maps: Vec<NodeId> = image.pyramid.maps().iter().map(|m| g.input(m.clone())).collect();
        let vision = mpp::forward_nodes(g, &self.config.mpp, &maps, local.f_attn)?.vision;
        let mut parts = vec![vision, local.f_local];
        if !instruction.is_empty() {
            parts.push(lm::embed_node(g, instruction)?);
        }
        g.concat_rows(&parts)
    }

    /// Prefix embeddings as a plain tensor, for reuse across decoding steps.
    pub fn prefix(&self, image: &PreparedImage, instruction: &[usize]) -> Result<Tensor<f64>> {
        let mut g = Graph::new(&self.params);
        let id = self.prefix_node(&mut g, image, instruction)?;
        Ok(g.value(id).clone())
    }

    /// Logits for a prefix followed by `tokens`.
    pub fn logits_after(&self, prefix: &Tensor<f64>, tokens: &[usize], use_lora: bool) -> Result<Tensor<f64>> {
        let needed = prefix.rows() + tokens.len();
        if needed > self.config.lm.context {
            return Err(Error::Invalid(format!(
                "sequence needs {needed} positions but the context holds {}",
                self.config.lm.context
            )));
        }
        let mut g = Graph::new(&self.params);
        let mut x = g.input(prefix.clone());
        if !tokens.is_empty() {
            let e = lm::embed_node(&mut g, tokens)?;
            x = g.concat_rows(&[x, e])?;
        }
        let lora = use_lora.then_some(&self.config.lora);
        let id = lm::forward_node(&mut g, &self.config.lm, lora, x)?;
        Ok(g.value(id).clone())
    }

    /// Masked next-token loss of one example as a graph node.
    pub fn loss_node(
        &self,
        g: &mut Graph<'_, f64>,
        image: &PreparedImage,
        instruction: &[usize],
        response: &[usize],
    ) -> Result<NodeId> {
        let layout = self.layout(instruction.len(), response.len());
        if layout.input_len() > self.config.lm.context {
            return Err(Error::Invalid(format!(
                "example needs {} positions but the context holds {}",
                layout.input_len(),
                self.config.lm.context
            )));
        }
        let prefix = self.prefix_node(g, image, instruction)?;
        let mut x = prefix;
        if response.len() > 1 {
            let e = lm::embed_node(g, &response[..response.len() - 1])?;
            x = g.concat_rows(&[prefix, e])?;
        }
        let logits = lm::forward_node(g, &self.config.lm, Some(&self.config.lora), x)?;
        g.masked_lm_loss(logits, &layout.targets(response), &layout.mask())
    }
}
