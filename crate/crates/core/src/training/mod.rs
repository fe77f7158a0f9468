//! Toy language model, LoRA adapters, sequence assembly, two-stage training,
//! greedy generation and checkpoints.

pub mod checkpoint;
pub mod corpus;
mod generate;
pub mod lm;
mod lora;
mod model;
pub mod tokenizer;
mod trainer;

pub use checkpoint::{Checkpoint, Manifest};
pub use generate::{generate, generate_ids, generate_prepared};
pub use lm::ToyLmConfig;
pub use lora::{lora_forward, lora_node, LoraAdapter, LoraConfig};
pub use model::{assemble_tokens, FeallmModel, ModelConfig, PreparedImage, SequenceLayout};
pub use tokenizer::Tokenizer;
pub use trainer::{
    train_stage, AbortRecord, Example, LearningRates, Optimizer, Stage, StageConfig, StageRecord, StepRecord,
    TrainingLog,
};
