//! Small decoder language models that read text and, optionally, one pooled
//! image feature per sequence; weight-space merging of a text-only and a
//! multimodal model; and zero-shot evaluation across training checkpoints.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod merge;
pub mod model;
pub mod tokenizer;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Modality};
pub use error::{Error, Result};
pub use features::{open_store, FeatureStore, PLACEHOLDER_KEY};
pub use merge::{merge, merge_params, merge_sweep, validate_compatibility};
pub use model::{forward, init_model, sentence_logprob, ModelConfig, ParameterSet};
pub use tokenizer::{train_bpe, Tokenizer};
pub use trainer::{train, TrainConfig};
