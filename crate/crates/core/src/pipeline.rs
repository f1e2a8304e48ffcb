//! Glue between the corpus, tokenizer, micro transformer, and metrics:
//! builds a vocabulary from training summaries, encodes examples for
//! either model head, runs fine-tuning, and scores predictions as the
//! same records the rest of the toolchain consumes. Also provides the
//! local [`Backend`] over a trained model and the [`SweepRunner`] the
//! robustness harness drives.

use crate::backend::{Backend, BackendError, PredictionRecord, Predicted, RawOutput};
use crate::ingest::LabeledExample;
use crate::metrics::{self, MetricsError};
use crate::model::{
    fine_tune, Checkpoint, FineTuneReport, MicroTransformer, ModelDims, ModelError, ToyTokenizer,
    TrainConfig, TrainExample, TrainMode,
};
use crate::prompt::{Prompt, PromptSlots};
use crate::robustness::{PointMetrics, SweepRunner};
use crate::taxonomy::{LabelToken, Task, Taxonomy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Vocabulary ceiling used when no override is given; matches the desk
/// model's default ceiling.
pub const DEFAULT_MAX_VOCAB: usize = 512;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("examples mix tasks {0} and {1}; train one task at a time")]
    MixedTasks(Task, Task),
    #[error("label {0} has no vocabulary slot")]
    MissingLabelSlot(LabelToken),
    #[error("label {0} is outside the task's label space")]
    LabelOutsideSpace(LabelToken),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// The single task shared by a slice of examples.
fn task_of(examples: &[LabeledExample]) -> Result<Task, PipelineError> {
    let first = examples.first().ok_or(PipelineError::EmptyTrainingSet)?;
    for ex in examples {
        if ex.task != first.task {
            return Err(PipelineError::MixedTasks(first.task, ex.task));
        }
    }
    Ok(first.task)
}

pub fn slots_for(example: &LabeledExample) -> PromptSlots {
    PromptSlots {
        task: example.task,
        summary: example.summary.clone(),
        vehicle_index: example.vehicle_index,
        crashconf: example.crashconf.clone(),
    }
}

/// Builds the vocabulary over the training summaries plus a reserved
/// slot for every label in both task spaces, so one tokenizer serves
/// either head and label ids stay stable across tasks.
pub fn build_tokenizer(
    train: &[LabeledExample],
    taxonomy: &Taxonomy,
    max_vocab: usize,
) -> ToyTokenizer {
    let mut labels = taxonomy.mancoll_tokens();
    labels.extend(taxonomy.crash_type_tokens());
    ToyTokenizer::build(
        train.iter().map(|ex| ex.summary.as_str()),
        labels.iter(),
        max_vocab,
    )
}

/// Encodes examples for the configured head. Decoder targets are label
/// vocabulary ids; encoder targets are indices into `space`.
pub fn encode_examples(
    examples: &[LabeledExample],
    tokenizer: &ToyTokenizer,
    space: &[LabelToken],
    mode: TrainMode,
    max_seq: usize,
) -> Result<Vec<TrainExample>, PipelineError> {
    examples
        .iter()
        .map(|ex| {
            let slots = slots_for(ex);
            let (tokens, target) = match mode {
                TrainMode::Lora => {
                    let id = tokenizer
                        .label_id(&ex.gold_label)
                        .ok_or_else(|| PipelineError::MissingLabelSlot(ex.gold_label.clone()))?;
                    (tokenizer.encode_for_lm(&slots, max_seq), id as usize)
                }
                TrainMode::Cls => {
                    let idx = space
                        .iter()
                        .position(|l| l == &ex.gold_label)
                        .ok_or_else(|| PipelineError::LabelOutsideSpace(ex.gold_label.clone()))?;
                    (tokenizer.encode_for_cls(&slots, max_seq), idx)
                }
            };
            Ok(TrainExample { tokens, target })
        })
        .collect()
}

/// Label-slot vocabulary ids for a label set, in set order.
pub fn allowed_ids(
    tokenizer: &ToyTokenizer,
    labels: &[LabelToken],
) -> Result<Vec<u32>, PipelineError> {
    labels
        .iter()
        .map(|l| {
            tokenizer
                .label_id(l)
                .ok_or_else(|| PipelineError::MissingLabelSlot(l.clone()))
        })
        .collect()
}

/// A fine-tuned model bundled with everything needed to run it: the
/// tokenizer that fixes the vocabulary, the task label space, and the
/// training configuration that produced it.
pub struct TrainedModel {
    pub model: MicroTransformer,
    pub tokenizer: ToyTokenizer,
    pub task: Task,
    pub space: Vec<LabelToken>,
    pub config: TrainConfig,
    pub report: FineTuneReport,
}

impl TrainedModel {
    /// Constrained prediction for one example. The candidate set is the
    /// example's configuration set for crash type when available,
    /// otherwise the full task space.
    pub fn predict(&self, example: &LabeledExample) -> Result<LabelToken, PipelineError> {
        let candidates = self.candidates_for(example);
        self.predict_among(example, &candidates)
    }

    fn candidates_for(&self, example: &LabeledExample) -> Vec<LabelToken> {
        if example.task == Task::CrashType {
            if let Some(conf) = &example.crashconf {
                if let Ok(set) = Taxonomy::builtin().candidate_set_for(conf) {
                    return set
                        .iter()
                        .map(|ct| LabelToken::new(ct.code.clone()))
                        .collect();
                }
            }
        }
        self.space.clone()
    }

    fn predict_among(
        &self,
        example: &LabeledExample,
        candidates: &[LabelToken],
    ) -> Result<LabelToken, PipelineError> {
        let slots = slots_for(example);
        match self.config.mode {
            TrainMode::Lora => {
                let tokens = self.tokenizer.encode_for_lm(&slots, self.model.dims.max_seq);
                let allowed = allowed_ids(&self.tokenizer, candidates)?;
                let id = self.model.generate_label(&tokens, &allowed)?;
                self.tokenizer
                    .label_of(id)
                    .ok_or(PipelineError::MissingLabelSlot(LabelToken::new(
                        id.to_string(),
                    )))
            }
            TrainMode::Cls => {
                let tokens = self.tokenizer.encode_for_cls(&slots, self.model.dims.max_seq);
                let head = self
                    .model
                    .cls_head
                    .as_ref()
                    .ok_or(PipelineError::Model(ModelError::ShapeMismatch {
                        op: "predict",
                        expected: "a trained CLS head".into(),
                        got: "none".into(),
                    }))?;
                let probs = self.model.cls_forward(&tokens, head)?;
                let best = candidates
                    .iter()
                    .filter_map(|c| {
                        self.space
                            .iter()
                            .position(|l| l == c)
                            .map(|i| (c, probs[i]))
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite probabilities"))
                    .map(|(c, _)| c.clone());
                best.ok_or(PipelineError::EmptyTrainingSet)
            }
        }
    }

    /// Scores a test set and returns one record per example, in input
    /// order, under the given backend identity.
    pub fn evaluate(
        &self,
        test: &[LabeledExample],
        backend_id: &str,
    ) -> Result<Vec<PredictionRecord>, PipelineError> {
        test.iter()
            .map(|ex| {
                let started = Instant::now();
                let predicted = self.predict(ex)?;
                Ok(PredictionRecord {
                    example_id: ex.case_id.clone(),
                    backend_id: backend_id.to_string(),
                    run_index: 1,
                    predicted: Predicted::Label(predicted),
                    gold: ex.gold_label.clone(),
                    latency_ms: started.elapsed().as_millis() as u64,
                    dropped: false,
                    error: None,
                })
            })
            .collect()
    }

    /// Accuracy and macro F1 over a test set, no exclusions.
    pub fn point_metrics(&self, test: &[LabeledExample]) -> Result<PointMetrics, PipelineError> {
        let records = self.evaluate(test, "micro")?;
        let none = BTreeSet::new();
        Ok(PointMetrics {
            accuracy: metrics::accuracy(&records, &none)?,
            macro_f1: metrics::macro_f1(&records, &none)?,
        })
    }
}

/// A trained model on disk: the checkpoint plus the task, label space,
/// training configuration, and loss trace needed to reload it as a
/// [`TrainedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub checkpoint: Checkpoint,
    pub task: Task,
    pub space: Vec<LabelToken>,
    pub config: TrainConfig,
    pub report: FineTuneReport,
}

impl ModelBundle {
    pub fn of(trained: &TrainedModel, template_version: &str, taxonomy_version: &str) -> Self {
        ModelBundle {
            checkpoint: Checkpoint {
                seed: trained.config.seed,
                template_version: template_version.to_string(),
                taxonomy_version: taxonomy_version.to_string(),
                tokenizer: trained.tokenizer.clone(),
                model: trained.model.clone(),
            },
            task: trained.task,
            space: trained.space.clone(),
            config: trained.config.clone(),
            report: trained.report.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        self.checkpoint.validate()?;
        let json = serde_json::to_string(self).map_err(ModelError::from)?;
        std::fs::write(path, json).map_err(ModelError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle, PipelineError> {
        let json = std::fs::read_to_string(path).map_err(ModelError::from)?;
        let bundle: ModelBundle = serde_json::from_str(&json)
            .map_err(|e| ModelError::CheckpointMismatch(e.to_string()))?;
        bundle.checkpoint.validate()?;
        Ok(bundle)
    }

    pub fn into_trained(self) -> TrainedModel {
        TrainedModel {
            model: self.checkpoint.model,
            tokenizer: self.checkpoint.tokenizer,
            task: self.task,
            space: self.space,
            config: self.config,
            report: self.report,
        }
    }
}

/// Trains a fresh micro transformer on the examples: vocabulary from
/// the training summaries, desk-default dimensions, then the configured
/// fine-tuning schedule. The whole run is a deterministic function of
/// (examples, config, max_vocab).
pub fn train_pipeline(
    train: &[LabeledExample],
    taxonomy: &Taxonomy,
    config: &TrainConfig,
    max_vocab: usize,
) -> Result<TrainedModel, PipelineError> {
    let task = task_of(train)?;
    let space = taxonomy.label_space(task);
    let tokenizer = build_tokenizer(train, taxonomy, max_vocab);
    let dims = ModelDims::desk_default(tokenizer.vocab_size(), tokenizer.cls_id() as usize);
    let mut model = MicroTransformer::new(dims, config.seed)?;
    let mut config = config.clone();
    if config.mode == TrainMode::Cls && config.categories.is_none() {
        config.categories = Some(space.len());
    }
    let encoded = encode_examples(train, &tokenizer, &space, config.mode, model.dims.max_seq)?;
    let report = fine_tune(&mut model, &encoded, &config)?;
    Ok(TrainedModel {
        model,
        tokenizer,
        task,
        space,
        config,
        report,
    })
}

/// An untrained model over the same vocabulary, for before/after
/// comparisons.
pub fn untrained_pipeline(
    train: &[LabeledExample],
    taxonomy: &Taxonomy,
    config: &TrainConfig,
    max_vocab: usize,
) -> Result<TrainedModel, PipelineError> {
    let task = task_of(train)?;
    let space = taxonomy.label_space(task);
    let tokenizer = build_tokenizer(train, taxonomy, max_vocab);
    let dims = ModelDims::desk_default(tokenizer.vocab_size(), tokenizer.cls_id() as usize);
    let mut model = MicroTransformer::new(dims, config.seed)?;
    let mut config = config.clone();
    if config.mode == TrainMode::Cls {
        if config.categories.is_none() {
            config.categories = Some(space.len());
        }
        model.cls_head = Some(crate::model::ClsHead::zeros(
            config.categories.expect("set above"),
            model.dims.d_model,
        ));
    }
    Ok(TrainedModel {
        model,
        tokenizer,
        task,
        space,
        config,
        report: FineTuneReport {
            losses: Vec::new(),
            final_train_accuracy: 0.0,
        },
    })
}

/// [`SweepRunner`] that trains the micro transformer at each sweep
/// point. The point seed overrides the training seed so repetitions
/// differ exactly as the harness schedules them.
pub struct MicroRunner {
    pub max_vocab: usize,
}

impl Default for MicroRunner {
    fn default() -> Self {
        MicroRunner {
            max_vocab: DEFAULT_MAX_VOCAB,
        }
    }
}

impl SweepRunner for MicroRunner {
    fn run_point(
        &self,
        train: &[LabeledExample],
        test: &[LabeledExample],
        config: &TrainConfig,
        seed: u64,
    ) -> Result<PointMetrics, String> {
        let mut config = config.clone();
        config.seed = seed;
        let trained = train_pipeline(train, Taxonomy::builtin(), &config, self.max_vocab)
            .map_err(|e| e.to_string())?;
        trained.point_metrics(test).map_err(|e| e.to_string())
    }
}

/// The local backend: a trained model answering rendered prompts. The
/// constraint set comes from the prompt itself and decoding is pure
/// argmax, so repeated calls give identical output.
pub struct LocalBackend {
    trained: TrainedModel,
    id: String,
}

impl LocalBackend {
    pub fn new(trained: TrainedModel, id: impl Into<String>) -> Self {
        LocalBackend {
            trained,
            id: id.into(),
        }
    }

    pub fn trained(&self) -> &TrainedModel {
        &self.trained
    }
}

impl Backend for LocalBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &Prompt) -> Result<RawOutput, BackendError> {
        let t = &self.trained;
        let label = match t.config.mode {
            TrainMode::Lora => {
                let tokens = t
                    .tokenizer
                    .encode_for_lm(&prompt.slots, t.model.dims.max_seq);
                let allowed = allowed_ids(&t.tokenizer, &prompt.allowed)
                    .map_err(|e| BackendError::Local(e.to_string()))?;
                let id = t
                    .model
                    .generate_label(&tokens, &allowed)
                    .map_err(|e| BackendError::Local(e.to_string()))?;
                t.tokenizer
                    .label_of(id)
                    .ok_or_else(|| BackendError::Local(format!("token {id} is not a label slot")))?
            }
            TrainMode::Cls => {
                let example = LabeledExample {
                    case_id: String::new(),
                    task: prompt.task,
                    year: 0,
                    summary: prompt.slots.summary.clone(),
                    vehicle_index: prompt.slots.vehicle_index,
                    crashconf: prompt.slots.crashconf.clone(),
                    gold_label: LabelToken::new("0"),
                    vehicle_count: 0,
                };
                t.predict_among(&example, &prompt.allowed)
                    .map_err(|e| BackendError::Local(e.to_string()))?
            }
        };
        Ok(RawOutput {
            text: label.as_str().to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{build_mancoll_prompt, parse_label, TemplateSet};
    use crate::synth::{generate, Difficulty};

    fn quick_config() -> TrainConfig {
        TrainConfig {
            steps: 120,
            batch_size: 8,
            learning_rate: 0.002,
            momentum: 0.9,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn tokenizer_reserves_every_label_slot() {
        let train = generate(Task::Mancoll, 12, 1, Difficulty::Plain);
        let taxonomy = Taxonomy::builtin();
        let tok = build_tokenizer(&train, taxonomy, DEFAULT_MAX_VOCAB);
        for label in taxonomy
            .mancoll_tokens()
            .iter()
            .chain(taxonomy.crash_type_tokens().iter())
        {
            assert!(tok.label_id(label).is_some(), "no slot for {label}");
        }
    }

    #[test]
    fn encoded_targets_point_at_label_slots() {
        let train = generate(Task::Mancoll, 12, 2, Difficulty::Plain);
        let taxonomy = Taxonomy::builtin();
        let tok = build_tokenizer(&train, taxonomy, DEFAULT_MAX_VOCAB);
        let space = taxonomy.label_space(Task::Mancoll);
        let enc = encode_examples(&train, &tok, &space, TrainMode::Lora, 64).unwrap();
        for (ex, te) in train.iter().zip(&enc) {
            assert_eq!(te.target as u32, tok.label_id(&ex.gold_label).unwrap());
            assert_eq!(te.tokens.last(), Some(&tok.sep_id()));
        }
        let enc = encode_examples(&train, &tok, &space, TrainMode::Cls, 64).unwrap();
        for (ex, te) in train.iter().zip(&enc) {
            assert_eq!(space[te.target], ex.gold_label);
            assert_eq!(te.tokens.first(), Some(&tok.cls_id()));
        }
    }

    #[test]
    fn training_improves_over_untrained() {
        let train = generate(Task::Mancoll, 56, 3, Difficulty::Plain);
        let test = generate(Task::Mancoll, 28, 900, Difficulty::Plain);
        let config = quick_config();
        let taxonomy = Taxonomy::builtin();
        let trained = train_pipeline(&train, taxonomy, &config, DEFAULT_MAX_VOCAB).unwrap();
        let baseline = untrained_pipeline(&train, taxonomy, &config, DEFAULT_MAX_VOCAB).unwrap();
        let after = trained.point_metrics(&test).unwrap().accuracy;
        let before = baseline.point_metrics(&test).unwrap().accuracy;
        assert!(
            after > before + 0.1,
            "training moved accuracy {before:.3} -> {after:.3}"
        );
    }

    #[test]
    fn predictions_stay_in_candidate_sets() {
        let train = generate(Task::CrashType, 24, 4, Difficulty::Plain);
        let config = quick_config();
        let trained =
            train_pipeline(&train, Taxonomy::builtin(), &config, DEFAULT_MAX_VOCAB).unwrap();
        for ex in &train {
            let predicted = trained.predict(ex).unwrap();
            let conf = ex.crashconf.as_deref().unwrap();
            let set = Taxonomy::builtin().candidate_set_for(conf).unwrap();
            assert!(
                set.iter().any(|ct| ct.code == predicted.as_str()),
                "{predicted} outside configuration {conf}"
            );
        }
    }

    #[test]
    fn local_backend_is_deterministic_and_parseable() {
        let train = generate(Task::Mancoll, 24, 5, Difficulty::Plain);
        let config = quick_config();
        let trained =
            train_pipeline(&train, Taxonomy::builtin(), &config, DEFAULT_MAX_VOCAB).unwrap();
        let backend = LocalBackend::new(trained, "micro");
        let templates = TemplateSet::builtin();
        let prompt =
            build_mancoll_prompt(&train[0].summary, Taxonomy::builtin(), &templates).unwrap();
        let first = backend.complete(&prompt).unwrap();
        let second = backend.complete(&prompt).unwrap();
        assert_eq!(first, second);
        parse_label(&first.text, &prompt.allowed).unwrap();
    }

    #[test]
    fn cls_mode_trains_and_predicts_in_space() {
        let train = generate(Task::Mancoll, 24, 6, Difficulty::Plain);
        let config = TrainConfig {
            mode: TrainMode::Cls,
            steps: 60,
            batch_size: 8,
            learning_rate: 0.005,
            momentum: 0.9,
            seed: 11,
            ..TrainConfig::default()
        };
        let trained =
            train_pipeline(&train, Taxonomy::builtin(), &config, DEFAULT_MAX_VOCAB).unwrap();
        let space = Taxonomy::builtin().label_space(Task::Mancoll);
        for ex in train.iter().take(6) {
            let predicted = trained.predict(ex).unwrap();
            assert!(space.contains(&predicted));
        }
    }

    #[test]
    fn bundle_round_trip_preserves_predictions() {
        let train = generate(Task::Mancoll, 24, 9, Difficulty::Plain);
        let config = quick_config();
        let trained =
            train_pipeline(&train, Taxonomy::builtin(), &config, DEFAULT_MAX_VOCAB).unwrap();
        let before: Vec<LabelToken> = train.iter().map(|ex| trained.predict(ex).unwrap()).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let bundle = ModelBundle::of(&trained, "t1", &Taxonomy::builtin().schema_version);
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert_eq!(loaded.checkpoint.template_version, "t1");
        assert_eq!(loaded.config, trained.config);

        let back = loaded.into_trained();
        let after: Vec<LabelToken> = train.iter().map(|ex| back.predict(ex).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn micro_runner_scores_a_point() {
        let train = generate(Task::Mancoll, 24, 8, Difficulty::Plain);
        let test = generate(Task::Mancoll, 12, 901, Difficulty::Plain);
        let runner = MicroRunner::default();
        let config = TrainConfig {
            steps: 40,
            batch_size: 8,
            learning_rate: 0.002,
            ..TrainConfig::default()
        };
        let metrics = runner.run_point(&train, &test, &config, 42).unwrap();
        assert!((0.0..=1.0).contains(&metrics.accuracy));
        assert!((0.0..=1.0).contains(&metrics.macro_f1));
    }

    #[test]
    fn mixed_tasks_are_rejected() {
        let mut train = generate(Task::Mancoll, 4, 9, Difficulty::Plain);
        train.extend(generate(Task::CrashType, 4, 9, Difficulty::Plain));
        let err = train_pipeline(
            &train,
            Taxonomy::builtin(),
            &TrainConfig::default(),
            DEFAULT_MAX_VOCAB,
        )
        .err()
        .expect("mixed tasks must fail");
        assert!(matches!(err, PipelineError::MixedTasks(_, _)));
    }
}
