//! Label spaces for the two extraction tasks: manner of collision
//! (MANCOLL) and fine-grained crash type (CRASHTYPE) grouped into crash
//! configurations. The shipped taxonomy lives in `assets/taxonomy.toml`;
//! alternative files with the same schema can be loaded at runtime.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;
use thiserror::Error;

/// Largest candidate set a single configuration may carry.
pub const MAX_CANDIDATE_SET: usize = 14;

/// MANCOLL id reserved for narratives whose manner of collision cannot
/// be determined. Excludable from evaluation by policy.
pub const UNKNOWN_MANCOLL_ID: u8 = 9;

/// An answer token exactly as a model must emit it: a MANCOLL id or a
/// crash-type code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelToken(String);

impl LabelToken {
    pub fn new(s: impl Into<String>) -> Self {
        LabelToken(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Numeric value of the token, if it is a plain integer code.
    pub fn numeric(&self) -> Option<i64> {
        self.0.parse().ok()
    }
}

impl fmt::Display for LabelToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LabelToken {
    fn from(s: &str) -> Self {
        LabelToken::new(s)
    }
}

impl From<u8> for LabelToken {
    fn from(v: u8) -> Self {
        LabelToken::new(v.to_string())
    }
}

/// The two extraction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mancoll,
    CrashType,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Mancoll => "mancoll",
            Task::CrashType => "crash_type",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mancoll" => Ok(Task::Mancoll),
            "crash_type" | "crashtype" => Ok(Task::CrashType),
            other => Err(format!("unknown task: {other}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("malformed taxonomy: {0}")]
    Malformed(String),
    #[error("crash type {code} listed under configurations {first} and {second}")]
    PartitionViolation {
        code: String,
        first: String,
        second: String,
    },
    #[error("configuration {id} carries {size} crash types, limit is {limit}")]
    OversizeCandidateSet { id: String, size: usize, limit: usize },
    #[error("unknown configuration: {0}")]
    UnknownConfiguration(String),
    #[error("reading taxonomy: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MancollCategory {
    pub id: u8,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub id: String,
    /// Crash category the configuration belongs to (six in total).
    pub category: String,
    pub name: String,
    /// Text block injected into CRASHTYPE prompts for this configuration.
    pub clarification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashType {
    pub code: String,
    pub configuration: String,
    pub description: String,
}

/// The full label space. Entry order in the file is the canonical order
/// used when rendering candidate lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub schema_version: String,
    /// Whether code 98 (third or subsequent vehicles) counts as part of
    /// the fine-grained label space.
    pub counts_include_code_98: bool,
    pub mancoll: Vec<MancollCategory>,
    #[serde(rename = "configuration")]
    pub configurations: Vec<Configuration>,
    #[serde(rename = "crash_type")]
    pub crash_types: Vec<CrashType>,
}

const BUILTIN_TAXONOMY: &str = include_str!("../assets/taxonomy.toml");

static BUILTIN: OnceLock<Taxonomy> = OnceLock::new();

impl Taxonomy {
    /// The taxonomy shipped with the crate.
    pub fn builtin() -> &'static Taxonomy {
        BUILTIN.get_or_init(|| {
            Taxonomy::from_toml_str(BUILTIN_TAXONOMY).expect("builtin taxonomy must validate")
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Taxonomy, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Taxonomy, TaxonomyError> {
        let taxonomy: Taxonomy =
            toml::from_str(text).map_err(|e| TaxonomyError::Malformed(e.to_string()))?;
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("taxonomy serializes")
    }

    /// Structural checks: exact MANCOLL id set, unique codes forming a
    /// partition over the configurations, bounded candidate sets.
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.schema_version.trim().is_empty() {
            return Err(TaxonomyError::Malformed("empty schema_version".into()));
        }
        let ids: BTreeSet<u8> = self.mancoll.iter().map(|c| c.id).collect();
        if ids.len() != self.mancoll.len() {
            return Err(TaxonomyError::Malformed("duplicate mancoll id".into()));
        }
        let expected: BTreeSet<u8> = [0, 1, 2, 4, 5, 6, 9].into_iter().collect();
        if ids != expected {
            return Err(TaxonomyError::Malformed(format!(
                "mancoll ids must be exactly {{0, 1, 2, 4, 5, 6, 9}}, found {ids:?}"
            )));
        }
        if self.mancoll.iter().any(|c| c.name.trim().is_empty()) {
            return Err(TaxonomyError::Malformed("empty mancoll name".into()));
        }

        let mut config_ids = BTreeSet::new();
        for conf in &self.configurations {
            if conf.id.trim().is_empty() || conf.name.trim().is_empty() {
                return Err(TaxonomyError::Malformed(
                    "configuration with empty id or name".into(),
                ));
            }
            if !config_ids.insert(conf.id.as_str()) {
                return Err(TaxonomyError::Malformed(format!(
                    "duplicate configuration id {}",
                    conf.id
                )));
            }
        }

        let mut seen: std::collections::BTreeMap<&str, &str> = Default::default();
        for ct in &self.crash_types {
            if ct.code.trim().is_empty() || ct.description.trim().is_empty() {
                return Err(TaxonomyError::Malformed(
                    "crash type with empty code or description".into(),
                ));
            }
            if !config_ids.contains(ct.configuration.as_str()) {
                return Err(TaxonomyError::UnknownConfiguration(ct.configuration.clone()));
            }
            if let Some(first) = seen.insert(ct.code.as_str(), ct.configuration.as_str()) {
                return Err(TaxonomyError::PartitionViolation {
                    code: ct.code.clone(),
                    first: first.to_string(),
                    second: ct.configuration.clone(),
                });
            }
        }

        for conf in &self.configurations {
            let size = self
                .crash_types
                .iter()
                .filter(|ct| ct.configuration == conf.id)
                .count();
            if size == 0 {
                return Err(TaxonomyError::Malformed(format!(
                    "configuration {} has an empty candidate set",
                    conf.id
                )));
            }
            if size > MAX_CANDIDATE_SET {
                return Err(TaxonomyError::OversizeCandidateSet {
                    id: conf.id.clone(),
                    size,
                    limit: MAX_CANDIDATE_SET,
                });
            }
        }
        Ok(())
    }

    pub fn configuration(&self, id: &str) -> Option<&Configuration> {
        self.configurations.iter().find(|c| c.id == id)
    }

    pub fn crash_type(&self, code: &str) -> Option<&CrashType> {
        self.crash_types.iter().find(|ct| ct.code == code)
    }

    /// Candidate crash types for one configuration, in file order.
    pub fn candidate_set_for(&self, conf_id: &str) -> Result<Vec<&CrashType>, TaxonomyError> {
        if self.configuration(conf_id).is_none() {
            return Err(TaxonomyError::UnknownConfiguration(conf_id.to_string()));
        }
        Ok(self
            .crash_types
            .iter()
            .filter(|ct| ct.configuration == conf_id)
            .collect())
    }

    pub fn mancoll_tokens(&self) -> Vec<LabelToken> {
        self.mancoll.iter().map(|c| LabelToken::from(c.id)).collect()
    }

    pub fn crash_type_tokens(&self) -> Vec<LabelToken> {
        self.crash_types
            .iter()
            .map(|ct| LabelToken::new(ct.code.clone()))
            .collect()
    }

    /// Full label space for a task, in canonical order.
    pub fn label_space(&self, task: Task) -> Vec<LabelToken> {
        match task {
            Task::Mancoll => self.mancoll_tokens(),
            Task::CrashType => self.crash_type_tokens(),
        }
    }

    /// Number of fine-grained crash-type codes under the given counting
    /// convention for code 98.
    pub fn crash_type_count(&self, include_code_98: bool) -> usize {
        let has_98 = self.crash_types.iter().any(|ct| ct.code == "98");
        let total = self.crash_types.len();
        if include_code_98 || !has_98 {
            total
        } else {
            total - 1
        }
    }

    pub fn unknown_mancoll_token(&self) -> LabelToken {
        LabelToken::from(UNKNOWN_MANCOLL_ID)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_taxonomy_validates() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.schema_version, "ciss-cctm.v1");
        assert!(tax.counts_include_code_98);
    }

    #[test]
    fn builtin_shape_matches_coding_chart() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.mancoll.len(), 7);
        assert_eq!(tax.configurations.len(), 13);
        assert_eq!(tax.crash_type_count(true), 98);
        assert_eq!(tax.crash_type_count(false), 97);
        let largest = tax
            .configurations
            .iter()
            .map(|c| tax.candidate_set_for(&c.id).unwrap().len())
            .max()
            .unwrap();
        assert_eq!(largest, MAX_CANDIDATE_SET);
        let categories: BTreeSet<&str> = tax
            .configurations
            .iter()
            .map(|c| c.category.as_str())
            .collect();
        assert_eq!(categories.len(), 6);
    }

    #[test]
    fn anchored_codes_present() {
        let tax = Taxonomy::builtin();
        for (code, conf) in [
            ("1", "A"),
            ("2", "A"),
            ("6", "B"),
            ("7", "B"),
            ("24", "D"),
            ("25", "D"),
            ("88", "L"),
            ("89", "L"),
            ("98", "M"),
        ] {
            let ct = tax.crash_type(code).unwrap_or_else(|| panic!("code {code} missing"));
            assert_eq!(ct.configuration, conf, "code {code} in wrong configuration");
        }
        assert_eq!(
            tax.crash_type("98").unwrap().description,
            "Third or subsequent vehicles involved in a crash"
        );
        assert_eq!(
            tax.crash_type("88").unwrap().description,
            "Straight paths striking from the left"
        );
        assert_eq!(
            tax.crash_type("89").unwrap().description,
            "Straight paths struck on the left"
        );
    }

    #[test]
    fn single_vehicle_codes_are_first_sixteen() {
        let tax = Taxonomy::builtin();
        for code in 1..=16 {
            let ct = tax.crash_type(&code.to_string()).unwrap();
            assert!(
                matches!(ct.configuration.as_str(), "A" | "B" | "C"),
                "code {code} should sit in a single-driver configuration"
            );
        }
    }

    #[test]
    fn mancoll_ids_fixed() {
        let tax = Taxonomy::builtin();
        let ids: Vec<u8> = tax.mancoll.iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 4, 5, 6, 9]);
        assert_eq!(tax.mancoll[1].name, "Rear-End");
        assert_eq!(tax.mancoll[6].name, "Unknown");
    }

    #[test]
    fn rejects_wrong_mancoll_set() {
        let mut tax = Taxonomy::builtin().clone();
        tax.mancoll[0].id = 3;
        assert!(matches!(tax.validate(), Err(TaxonomyError::Malformed(_))));
    }

    #[test]
    fn rejects_partition_violation() {
        let mut tax = Taxonomy::builtin().clone();
        let mut dup = tax.crash_types[0].clone();
        dup.configuration = "B".into();
        tax.crash_types.push(dup);
        match tax.validate() {
            Err(TaxonomyError::PartitionViolation { code, first, second }) => {
                assert_eq!(code, "1");
                assert_eq!(first, "A");
                assert_eq!(second, "B");
            }
            other => panic!("expected partition violation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_oversize_candidate_set() {
        let mut tax = Taxonomy::builtin().clone();
        for i in 0..2 {
            tax.crash_types.push(CrashType {
                code: format!("x{i}"),
                configuration: "D".into(),
                description: "padding".into(),
            });
        }
        assert!(matches!(
            tax.validate(),
            Err(TaxonomyError::OversizeCandidateSet { size: 16, .. })
        ));
    }

    #[test]
    fn unknown_configuration_is_an_error() {
        let tax = Taxonomy::builtin();
        assert!(matches!(
            tax.candidate_set_for("Z"),
            Err(TaxonomyError::UnknownConfiguration(_))
        ));
    }

    #[test]
    fn toml_round_trip_is_identical() {
        let tax = Taxonomy::builtin();
        let text = tax.to_toml_string();
        let again = Taxonomy::from_toml_str(&text).unwrap();
        assert_eq!(*tax, again);
    }

    #[test]
    fn candidate_order_follows_file_order() {
        let tax = Taxonomy::builtin();
        let codes: Vec<&str> = tax
            .candidate_set_for("D")
            .unwrap()
            .iter()
            .map(|ct| ct.code.as_str())
            .collect();
        let expected: Vec<String> = (17..=30).map(|c| c.to_string()).collect();
        assert_eq!(codes, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
