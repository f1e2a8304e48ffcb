//! Crash narrative information extraction at desk scale: a label
//! taxonomy, prompt assembly, a from-scratch micro transformer with LoRA
//! fine-tuning, inference backends, evaluation metrics, and robustness
//! sweeps over synthetic or ingested crash narratives.

pub mod backend;
pub mod fixtures;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod robustness;
pub mod synth;
pub mod taxonomy;

pub use backend::{Backend, BackendConfig, Predicted, PredictionRecord};
pub use ingest::LabeledExample;
pub use taxonomy::{LabelToken, Task, Taxonomy};
