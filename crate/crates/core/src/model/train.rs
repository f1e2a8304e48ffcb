//! Stochastic gradient descent with optional momentum over the micro
//! transformer, in two regimes: adapter-only training for the decoder
//! formulation (base frozen) and end-to-end training for the encoder
//! CLS formulation.

use super::attention::AttnMode;
use super::lora::ProjectionKind;
use super::net::{ClsHead, Gradients, MicroTransformer};
use super::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Decoder formulation: gradients are applied to LoRA A and B only.
    Lora,
    /// Encoder formulation: every base parameter plus the CLS head.
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub projection_set: Vec<ProjectionKind>,
    pub rank: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Category count for a fresh CLS head when encoder training starts
    /// without one.
    pub categories: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            projection_set: vec![ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V],
            rank: 8,
            alpha: 16.0,
            learning_rate: 0.001,
            momentum: 0.9,
            steps: 800,
            batch_size: 16,
            seed: 0,
            mode: TrainMode::Lora,
            categories: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.projection_set.is_empty() {
            return Err(ModelError::ShapeMismatch {
                op: "TrainConfig",
                expected: "non-empty projection set".into(),
                got: "{}".into(),
            });
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(ModelError::ShapeMismatch {
                op: "TrainConfig",
                expected: "positive steps and batch size".into(),
                got: format!("steps {}, batch {}", self.steps, self.batch_size),
            });
        }
        Ok(())
    }
}

/// One training example: the encoded input and its target. The target
/// is a vocabulary token id in decoder mode and a category index in
/// encoder mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub target: usize,
}

/// Carries the momentum state between steps.
pub struct Trainer {
    velocity: Gradients,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: &MicroTransformer, config: TrainConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Trainer {
            velocity: Gradients::zeros_like(model),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn apply(&mut self, model: &mut MicroTransformer, grads: &Gradients) {
        let lr = self.config.learning_rate;
        let mu = self.config.momentum;
        let update2 = |w: &mut ndarray::Array2<f64>,
                           v: &mut ndarray::Array2<f64>,
                           g: &ndarray::Array2<f64>| {
            v.zip_mut_with(g, |vi, &gi| *vi = mu * *vi - lr * gi);
            *w += &*v;
        };
        let update1 = |w: &mut ndarray::Array1<f64>,
                           v: &mut ndarray::Array1<f64>,
                           g: &ndarray::Array1<f64>| {
            v.zip_mut_with(g, |vi, &gi| *vi = mu * *vi - lr * gi);
            *w += &*v;
        };
        match self.config.mode {
            TrainMode::Lora => {
                for (i, (da, db)) in grads.adapters.iter().enumerate() {
                    let a = &mut model.adapters[i];
                    let (va, vb) = &mut self.velocity.adapters[i];
                    update2(&mut a.a, va, da);
                    update2(&mut a.b, vb, db);
                }
            }
            TrainMode::Cls => {
                update2(
                    &mut model.token_embed,
                    &mut self.velocity.token_embed,
                    &grads.token_embed,
                );
                update2(
                    &mut model.pos_embed,
                    &mut self.velocity.pos_embed,
                    &grads.pos_embed,
                );
                for (li, lg) in grads.layers.iter().enumerate() {
                    let layer = &mut model.layers[li];
                    let vel = &mut self.velocity.layers[li];
                    for (hi, hg) in lg.heads.iter().enumerate() {
                        update2(&mut layer.heads[hi].w_q, &mut vel.heads[hi].w_q, &hg.w_q);
                        update2(&mut layer.heads[hi].w_k, &mut vel.heads[hi].w_k, &hg.w_k);
                        update2(&mut layer.heads[hi].w_v, &mut vel.heads[hi].w_v, &hg.w_v);
                    }
                    update2(&mut layer.w_o, &mut vel.w_o, &lg.w_o);
                    update2(&mut layer.w_ff1, &mut vel.w_ff1, &lg.w_ff1);
                    update1(&mut layer.b_ff1, &mut vel.b_ff1, &lg.b_ff1);
                    update2(&mut layer.w_ff2, &mut vel.w_ff2, &lg.w_ff2);
                    update1(&mut layer.b_ff2, &mut vel.b_ff2, &lg.b_ff2);
                }
                if let (Some(head), Some(cg), Some(cv)) = (
                    model.cls_head.as_mut(),
                    grads.cls.as_ref(),
                    self.velocity.cls.as_mut(),
                ) {
                    update2(&mut head.w, &mut cv.w, &cg.w);
                    update1(&mut head.b, &mut cv.b, &cg.b);
                }
            }
        }
    }
}

fn attn_mode(mode: TrainMode) -> AttnMode {
    match mode {
        TrainMode::Lora => AttnMode::Causal,
        TrainMode::Cls => AttnMode::Bidirectional,
    }
}

/// Mean loss over the batch, gradients accumulated and applied once.
pub fn train_step(
    model: &mut MicroTransformer,
    batch: &[TrainExample],
    trainer: &mut Trainer,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mode = attn_mode(trainer.config.mode);
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for ex in batch {
        total += model.accumulate_grads(&ex.tokens, ex.target, mode, &mut grads)?;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: 0, loss });
    }
    grads.scale(1.0 / batch.len() as f64);
    trainer.apply(model, &grads);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// Runs the configured schedule in place. Adapters are installed per
/// the projection set when none are present (decoder mode); a zero CLS
/// head is installed when needed (encoder mode). Batches are sampled
/// with a seeded generator, so the whole trajectory is a deterministic
/// function of (model, examples, config).
pub fn fine_tune(
    model: &mut MicroTransformer,
    examples: &[TrainExample],
    config: &TrainConfig,
) -> Result<FineTuneReport, ModelError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    match config.mode {
        TrainMode::Lora => {
            if model.adapters.is_empty() {
                model.install_adapters(
                    &config.projection_set,
                    config.rank,
                    config.alpha,
                    config.seed,
                )?;
            }
        }
        TrainMode::Cls => {
            if model.cls_head.is_none() {
                let categories = config.categories.ok_or(ModelError::ShapeMismatch {
                    op: "fine_tune",
                    expected: "a category count for a fresh CLS head".into(),
                    got: "none".into(),
                })?;
                model.cls_head = Some(ClsHead::zeros(categories, model.dims.d_model));
            }
        }
    }

    let mut trainer = Trainer::new(model, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<TrainExample> = (0..config.batch_size)
            .map(|_| examples[rng.gen_range(0..examples.len())].clone())
            .collect();
        let loss = train_step(model, &batch, &mut trainer).map_err(|e| match e {
            ModelError::NonFiniteLoss { loss, .. } => ModelError::NonFiniteLoss { step, loss },
            other => other,
        })?;
        losses.push(loss);
    }

    let mut correct = 0usize;
    for ex in examples {
        match config.mode {
            TrainMode::Lora => {
                let logits = model.lm_logits(&ex.tokens)?;
                let best = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty vocabulary");
                if best == ex.target {
                    correct += 1;
                }
            }
            TrainMode::Cls => {
                let head = model.cls_head.clone().expect("installed above");
                let probs = model.cls_forward(&ex.tokens, &head)?;
                let best = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                    .map(|(i, _)| i)
                    .expect("non-empty categories");
                if best == ex.target {
                    correct += 1;
                }
            }
        }
    }
    Ok(FineTuneReport {
        losses,
        final_train_accuracy: correct as f64 / examples.len() as f64,
    })
}
