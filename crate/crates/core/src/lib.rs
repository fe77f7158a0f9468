//! Facial emotion analysis with a multimodal language model, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, differentiable ops, a reverse-mode tape and a
//!   finite-difference gradient checker.
//! - [`region_cropper`]: the sixteen 48x48 local regions of a face image.
//! - [`lca`]: the local clue aggregator (region conv features, region
//!   self-attention, projection to one local token).
//! - [`encoder`]: the visual-encoder seam plus a deterministic stub.
//! - [`mpp`]: the multi-perspective projector fusing shallow, deep and local
//!   features into visual tokens.
//! - [`instructions`]: instruction-data generation, validation and splits.
//! - [`feabench`]: prompt sampling, response parsing and scoring.
//! - [`training`]: toy language model, LoRA, two-stage training, generation.

pub mod encoder;
pub mod error;
pub mod feabench;
pub mod instructions;
pub mod jsonl;
pub mod labels;
pub mod lca;
pub mod mpp;
pub mod numerics;
pub mod region_cropper;
pub mod training;

pub use error::{Error, Result};
