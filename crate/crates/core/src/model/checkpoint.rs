//! Self-describing JSON checkpoints. Everything needed to reproduce
//! inference travels together: dimensions, every matrix, the adapter
//! list, the tokenizer, the training seed, and the template/taxonomy
//! versions the model was trained against. All floats survive the trip
//! bit-exactly.

use super::net::MicroTransformer;
use super::tokenizer::ToyTokenizer;
use super::ModelError;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub template_version: String,
    pub taxonomy_version: String,
    pub tokenizer: ToyTokenizer,
    pub model: MicroTransformer,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.model.validate()?;
        if self.tokenizer.vocab_size() != self.model.dims.vocab_size {
            return Err(ModelError::CheckpointMismatch(format!(
                "tokenizer has {} entries, model expects {}",
                self.tokenizer.vocab_size(),
                self.model.dims.vocab_size
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    checkpoint.validate()?;
    let json = serde_json::to_string(checkpoint)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let json = fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| ModelError::CheckpointMismatch(e.to_string()))?;
    checkpoint.validate()?;
    Ok(checkpoint)
}
