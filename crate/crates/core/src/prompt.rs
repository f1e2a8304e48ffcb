//! Prompt assembly from versioned template assets, plus the strict
//! output parser. Templates carry named slots in curly braces; anything
//! that is not a registered slot name stays literal.

use crate::taxonomy::{LabelToken, Task, Taxonomy, TaxonomyError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

const BUILTIN_MANCOLL: &str = include_str!("../assets/templates/mancoll.txt");
const BUILTIN_CRASHTYPE: &str = include_str!("../assets/templates/crashtype.txt");

/// Version string of the templates shipped with the crate.
pub const BUILTIN_TEMPLATE_VERSION: &str = "appendix-a.v1";

const MANCOLL_CONSTRAINT: &str = "Only respond with a single number";
const CRASHTYPE_CONSTRAINT: &str = "Respond with only one number or letter";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("summary is empty after trimming")]
    EmptySummary,
    #[error("template for {task} is missing required slot {{{slot}}}")]
    MissingSlot { task: Task, slot: &'static str },
    #[error("template for {task} lacks the output-constraint sentence")]
    MissingConstraint { task: Task },
    #[error("model output is not a single allowed token: {text:?}")]
    InvalidOutput { text: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("reading template: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed template manifest: {0}")]
    Manifest(String),
}

/// What a batch runner does with output that fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InvalidPolicy {
    /// Score the prediction as wrong.
    TreatAsWrong,
    /// Re-query once, then treat as wrong.
    #[default]
    RetryOnce,
    /// Mark the record dropped so metrics can exclude it.
    Drop,
}

/// Slot values a prompt was rendered from. The local backend reads these
/// instead of re-parsing the rendered text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSlots {
    pub task: Task,
    pub summary: String,
    pub vehicle_index: Option<u32>,
    pub crashconf: Option<String>,
}

/// A rendered prompt together with the tokens a valid answer may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub task: Task,
    pub text: String,
    pub allowed: Vec<LabelToken>,
    pub slots: PromptSlots,
}

/// A pair of task templates under one version string.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub version: String,
    mancoll: String,
    crashtype: String,
}

#[derive(Debug, Deserialize)]
struct TemplateManifest {
    version: String,
    mancoll: String,
    crashtype: String,
}

impl TemplateSet {
    /// Templates shipped with the crate.
    pub fn builtin() -> TemplateSet {
        TemplateSet::new(
            BUILTIN_TEMPLATE_VERSION,
            BUILTIN_MANCOLL.to_string(),
            BUILTIN_CRASHTYPE.to_string(),
        )
        .expect("builtin templates must validate")
    }

    pub fn new(
        version: impl Into<String>,
        mancoll: String,
        crashtype: String,
    ) -> Result<TemplateSet, PromptError> {
        let set = TemplateSet {
            version: version.into(),
            mancoll,
            crashtype,
        };
        set.validate()?;
        Ok(set)
    }

    /// Loads a template directory: a `templates.toml` manifest naming the
    /// version and the two template files.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<TemplateSet, PromptError> {
        let dir = dir.as_ref();
        let manifest_text = std::fs::read_to_string(dir.join("templates.toml"))?;
        let manifest: TemplateManifest =
            toml::from_str(&manifest_text).map_err(|e| PromptError::Manifest(e.to_string()))?;
        let mancoll = std::fs::read_to_string(dir.join(&manifest.mancoll))?;
        let crashtype = std::fs::read_to_string(dir.join(&manifest.crashtype))?;
        TemplateSet::new(manifest.version, mancoll, crashtype)
    }

    fn validate(&self) -> Result<(), PromptError> {
        if !self.mancoll.contains("{summary}") {
            return Err(PromptError::MissingSlot {
                task: Task::Mancoll,
                slot: "summary",
            });
        }
        if !self.mancoll.contains(MANCOLL_CONSTRAINT) {
            return Err(PromptError::MissingConstraint { task: Task::Mancoll });
        }
        for slot in ["crash_type_options", "vehicle_index", "vehicle_summary"] {
            if !self.crashtype.contains(&format!("{{{slot}}}")) {
                return Err(PromptError::MissingSlot {
                    task: Task::CrashType,
                    slot: match slot {
                        "crash_type_options" => "crash_type_options",
                        "vehicle_index" => "vehicle_index",
                        _ => "vehicle_summary",
                    },
                });
            }
        }
        if !self.crashtype.contains(CRASHTYPE_CONSTRAINT) {
            return Err(PromptError::MissingConstraint {
                task: Task::CrashType,
            });
        }
        Ok(())
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut text = template.to_string();
    for (name, value) in slots {
        text = text.replace(&format!("{{{name}}}"), value);
    }
    text
}

/// Renders the MANCOLL prompt for one narrative summary.
pub fn build_mancoll_prompt(
    summary: &str,
    taxonomy: &Taxonomy,
    templates: &TemplateSet,
) -> Result<Prompt, PromptError> {
    if summary.trim().is_empty() {
        return Err(PromptError::EmptySummary);
    }
    let text = fill(&templates.mancoll, &[("summary", summary)]);
    Ok(Prompt {
        task: Task::Mancoll,
        text,
        allowed: taxonomy.mancoll_tokens(),
        slots: PromptSlots {
            task: Task::Mancoll,
            summary: summary.to_string(),
            vehicle_index: None,
            crashconf: None,
        },
    })
}

/// Renders the candidate options block for one configuration: header,
/// clarification rules, then the candidate codes in file order.
fn render_options(taxonomy: &Taxonomy, conf_id: &str) -> Result<String, TaxonomyError> {
    let conf = taxonomy
        .configuration(conf_id)
        .ok_or_else(|| TaxonomyError::UnknownConfiguration(conf_id.to_string()))?;
    let candidates = taxonomy.candidate_set_for(conf_id)?;
    let mut block = format!(
        "Configuration {}: {} ({})\n{}\n\n",
        conf.id,
        conf.name,
        conf.category,
        conf.clarification.trim()
    );
    for ct in candidates {
        block.push_str(&format!("{}: {}\n", ct.code, ct.description));
    }
    // Drop the trailing newline so the template controls spacing.
    block.truncate(block.trim_end_matches('\n').len());
    Ok(block)
}

/// Renders the CRASHTYPE prompt for one vehicle of one narrative.
pub fn build_crashtype_prompt(
    summary: &str,
    vehicle_index: u32,
    conf_id: &str,
    taxonomy: &Taxonomy,
    templates: &TemplateSet,
) -> Result<Prompt, PromptError> {
    if summary.trim().is_empty() {
        return Err(PromptError::EmptySummary);
    }
    let options = render_options(taxonomy, conf_id)?;
    let index = format!("V{vehicle_index}");
    let text = fill(
        &templates.crashtype,
        &[
            ("crash_type_options", options.as_str()),
            ("vehicle_index", index.as_str()),
            ("vehicle_summary", summary),
        ],
    );
    let allowed = taxonomy
        .candidate_set_for(conf_id)?
        .iter()
        .map(|ct| LabelToken::new(ct.code.clone()))
        .collect();
    Ok(Prompt {
        task: Task::CrashType,
        text,
        allowed,
        slots: PromptSlots {
            task: Task::CrashType,
            summary: summary.to_string(),
            vehicle_index: Some(vehicle_index),
            crashconf: Some(conf_id.to_string()),
        },
    })
}

/// Strict answer parsing: trim whitespace, strip surrounding punctuation
/// and quotes, then require an exact, case-sensitive match against the
/// allowed tokens.
pub fn parse_label(raw: &str, allowed: &[LabelToken]) -> Result<LabelToken, PromptError> {
    let stripped = raw
        .trim()
        .trim_matches(|c: char| !c.is_ascii_alphanumeric());
    allowed
        .iter()
        .find(|t| t.as_str() == stripped)
        .cloned()
        .ok_or_else(|| PromptError::InvalidOutput {
            text: raw.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tax() -> &'static Taxonomy {
        Taxonomy::builtin()
    }

    #[test]
    fn mancoll_prompt_lists_every_token_verbatim() {
        let p = build_mancoll_prompt("V1 struck a tree.", tax(), &TemplateSet::builtin()).unwrap();
        assert_eq!(p.allowed.len(), 7);
        for token in &p.allowed {
            assert!(
                p.text.contains(&format!("{}:", token.as_str())),
                "token {token} missing from prompt"
            );
        }
        assert!(p.text.contains(MANCOLL_CONSTRAINT));
        assert!(p.text.contains("classify based on the **first** collision described in the summary"));
    }

    #[test]
    fn crashtype_prompt_carries_candidate_set_only() {
        let p = build_crashtype_prompt("V1 struck V2.", 2, "D", tax(), &TemplateSet::builtin())
            .unwrap();
        let codes: Vec<&str> = p.allowed.iter().map(|t| t.as_str()).collect();
        let expected: Vec<String> = (17..=30).map(|c| c.to_string()).collect();
        assert_eq!(codes, expected.iter().map(String::as_str).collect::<Vec<_>>());
        for code in &expected {
            assert!(p.text.contains(&format!("\n{code}: ")));
        }
        assert!(!p.text.contains("\n31: "), "codes from other configurations leaked in");
        assert!(p.text.contains("- Vehicle index: V2"));
        assert!(p.text.contains(CRASHTYPE_CONSTRAINT));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = build_crashtype_prompt("V1 struck V2.", 1, "L", tax(), &TemplateSet::builtin())
            .unwrap();
        let b = build_crashtype_prompt("V1 struck V2.", 1, "L", tax(), &TemplateSet::builtin())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_summary_is_rejected() {
        assert!(matches!(
            build_mancoll_prompt("   ", tax(), &TemplateSet::builtin()),
            Err(PromptError::EmptySummary)
        ));
    }

    #[test]
    fn unknown_configuration_is_rejected() {
        assert!(matches!(
            build_crashtype_prompt("text", 1, "Z", tax(), &TemplateSet::builtin()),
            Err(PromptError::Taxonomy(TaxonomyError::UnknownConfiguration(_)))
        ));
    }

    #[test]
    fn template_without_summary_slot_is_rejected() {
        let err = TemplateSet::new(
            "broken.v0",
            "no slot here. Only respond with a single number".into(),
            BUILTIN_CRASHTYPE.to_string(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PromptError::MissingSlot {
                task: Task::Mancoll,
                slot: "summary"
            }
        ));
    }

    #[test]
    fn parse_label_handles_whitespace_and_punctuation() {
        let allowed: Vec<LabelToken> = ["0", "1", "2", "4", "5", "6", "9"]
            .iter()
            .map(|s| LabelToken::from(*s))
            .collect();
        assert_eq!(parse_label(" 4\n", &allowed).unwrap().as_str(), "4");
        assert_eq!(parse_label("\"5\".", &allowed).unwrap().as_str(), "5");
        assert_eq!(parse_label("(9)", &allowed).unwrap().as_str(), "9");
        assert!(parse_label("angle", &allowed).is_err());
        assert!(parse_label("10", &allowed).is_err());
        assert!(parse_label("", &allowed).is_err());
        assert!(parse_label("4 5", &allowed).is_err());
    }

    #[test]
    fn parse_label_round_trips_every_token() {
        let tax = tax();
        for token in tax.label_space(Task::Mancoll) {
            assert_eq!(parse_label(token.as_str(), &tax.mancoll_tokens()).unwrap(), token);
        }
        for conf in &tax.configurations {
            let allowed: Vec<LabelToken> = tax
                .candidate_set_for(&conf.id)
                .unwrap()
                .iter()
                .map(|ct| LabelToken::new(ct.code.clone()))
                .collect();
            for token in &allowed {
                assert_eq!(&parse_label(token.as_str(), &allowed).unwrap(), token);
            }
        }
    }
}
