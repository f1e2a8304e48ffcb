//! Config file loading and the resolution order shared by every
//! command: built-in defaults, then the config file, then command-line
//! flags. Artifact stamps are derived from the resolved state.

use crate::CliError;
use crashtext::backend::BackendConfig;
use crashtext::model::TrainConfig;
use crashtext::prompt::TemplateSet;
use crashtext::report::Stamp;
use crashtext::robustness::SweepAxis;
use crashtext::taxonomy::Taxonomy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// The documented key set of the TOML config file. Every key is
/// optional; command-line flags override whatever the file sets.
///
/// ```toml
/// taxonomy = "taxonomy.toml"        # label taxonomy file; built-in when absent
/// templates = "templates/"          # template directory; built-in when absent
/// seed = 42                         # default seed for synth, finetune, and sweep
///
/// [backend]                         # inference backend (all keys optional)
/// endpoint = "local"                # "local" or an HTTP URL
/// checkpoint = "model.json"         # model bundle for the local backend
/// temperature = 0.2
///
/// [train]                           # fine-tuning schedule (all keys optional)
/// steps = 800
/// learning_rate = 0.001
///
/// [sweep]                           # sweep axis and grid
/// axis = "noise_ratio"              # or "train_size"
/// points = [0.0, 0.1, 0.2, 0.3]
/// repetitions = 3
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub taxonomy: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub seed: Option<u64>,
    pub backend: Option<BackendConfig>,
    pub train: Option<TrainConfig>,
    pub sweep: Option<SweepTable>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepTable {
    pub axis: Option<SweepAxis>,
    pub points: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub repetitions: Option<usize>,
}

pub struct Settings {
    pub file: FileConfig,
    taxonomy_override: Option<PathBuf>,
    templates_override: Option<PathBuf>,
}

impl Settings {
    pub fn load(
        config: Option<&Path>,
        taxonomy: Option<PathBuf>,
        templates: Option<PathBuf>,
    ) -> Result<Settings, CliError> {
        let file = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        Ok(Settings {
            file,
            taxonomy_override: taxonomy,
            templates_override: templates,
        })
    }

    pub fn taxonomy(&self) -> Result<Taxonomy, CliError> {
        let path = self.taxonomy_override.as_ref().or(self.file.taxonomy.as_ref());
        match path {
            Some(p) => Ok(Taxonomy::load(p)?),
            None => Ok(Taxonomy::builtin().clone()),
        }
    }

    pub fn templates(&self) -> Result<TemplateSet, CliError> {
        let path = self
            .templates_override
            .as_ref()
            .or(self.file.templates.as_ref());
        match path {
            Some(p) => Ok(TemplateSet::load_dir(p)?),
            None => Ok(TemplateSet::builtin()),
        }
    }

    pub fn backend(&self) -> BackendConfig {
        self.file.backend.clone().unwrap_or_default()
    }

    pub fn train(&self) -> TrainConfig {
        let mut train = self.file.train.clone().unwrap_or_default();
        if self.file.train.as_ref().map_or(true, |t| t.seed == 0) {
            if let Some(seed) = self.file.seed {
                train.seed = seed;
            }
        }
        train
    }

    pub fn seed(&self) -> u64 {
        self.file.seed.unwrap_or(0)
    }
}

/// Short content hash of the effective configuration, for artifact
/// stamps.
pub fn config_digest<T: Serialize>(effective: &T) -> String {
    let canonical = serde_json::to_string(effective).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn stamp<T: Serialize>(
    templates: &TemplateSet,
    taxonomy: &Taxonomy,
    effective: &T,
    seed: u64,
) -> Stamp {
    Stamp::new(
        templates.version.clone(),
        taxonomy.schema_version.clone(),
        config_digest(effective),
        seed,
    )
}

/// Stamp rendered as comment lines for plot-ready tables.
pub fn stamp_comment(stamp: &Stamp) -> String {
    format!(
        "# template_version={}\n# taxonomy_version={}\n# config_digest={}\n# seed={}\n",
        stamp.template_version, stamp.taxonomy_version, stamp.config_digest, stamp.seed
    )
}
