//! Desk-scale transformer built directly on ndarray: a decoder-style
//! single-token generator and an encoder CLS-classification head over
//! the same blocks, with LoRA adapters on the attention projections.
//!
//! Everything is f64 and deterministic per seed. There is no layer
//! normalization, KV cache, or quantization; the point is exercising
//! the adaptation math end to end, not throughput.

mod attention;
mod checkpoint;
mod lora;
mod net;
mod tokenizer;
mod train;

pub use attention::{attention_forward, attention_forward_probs, AttnMode};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use lora::{lora_delta, merge_adapter, LoraAdapter, ProjectionKind};
pub use net::{
    cross_entropy_loss, ClsHead, HeadWeights, LayerWeights, MicroTransformer, ModelDims,
};
pub use tokenizer::ToyTokenizer;
pub use train::{
    fine_tune, train_step, FineTuneReport, TrainConfig, TrainExample, TrainMode, Trainer,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value encountered in {0}")]
    NonFiniteInput(&'static str),
    #[error("sequence of length {len} exceeds the model limit {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    IndexOutOfRange { id: usize, vocab: usize },
    #[error("sequence does not begin with the CLS token")]
    MissingClsToken,
    #[error("loss became non-finite at step {step} (loss {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("adapter rank {rank} exceeds min(d,k)/2 = {limit}")]
    RankTooLarge { rank: usize, limit: usize },
    #[error("adapter targets layer {layer} head {head}, model has {layers} layers of {heads} heads")]
    AdapterOutOfRange {
        layer: usize,
        head: usize,
        layers: usize,
        heads: usize,
    },
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding failed: {0}")]
    Encoding(#[from] serde_json::Error),
}

/// Numeric tolerance constants used across the model contracts, kept in
/// one place so tests and callers agree on them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Attention rows must sum to one within this.
    pub attention_row_sum: f64,
    /// Per-logit bound for merged-weights vs adapter-path equivalence.
    pub merge_equivalence: f64,
    /// Relative error bound for finite-difference gradient checks.
    pub gradient_check: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            attention_row_sum: 1e-9,
            merge_equivalence: 1e-6,
            gradient_check: 1e-4,
        }
    }
}
