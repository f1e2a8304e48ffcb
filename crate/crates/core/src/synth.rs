//! Synthetic crash narratives with known gold labels. Each category
//! carries signal words that no other category's templates use, so a
//! small keyword oracle can label the plain corpus perfectly; that
//! separability is what makes the fine-tuning experiments meaningful.

use crate::ingest::LabeledExample;
use crate::taxonomy::{LabelToken, Task};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown task {0:?} (expected mancoll or crash_type)")]
    UnknownTask(String),
    #[error("unknown difficulty {0:?} (expected plain or intertwined)")]
    UnknownDifficulty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Plain,
    Intertwined,
}

impl std::str::FromStr for Difficulty {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Difficulty::Plain),
            "intertwined" => Ok(Difficulty::Intertwined),
            other => Err(SynthError::UnknownDifficulty(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    /// Year stamped on every generated example.
    pub year: u16,
    /// Fraction of MANCOLL examples whose gold label is Unknown (9).
    pub unknown_rate: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            year: 2020,
            unknown_rate: 0.016,
        }
    }
}

const DIRECTIONS: [&str; 8] = [
    "north",
    "south",
    "east",
    "west",
    "northeast",
    "northwest",
    "southeast",
    "southwest",
];
const ROADS: [&str; 24] = [
    "on a rural highway",
    "on a two lane roadway",
    "on the interstate",
    "near the exit ramp",
    "in a work zone",
    "on a divided arterial",
    "on an undivided state route",
    "past a shopping plaza entrance",
    "on a residential street",
    "on a county road",
    "approaching a narrow bridge",
    "on a four lane boulevard",
    "near a tunnel portal",
    "along a frontage road",
    "on a mountain grade",
    "near a school zone",
    "on an urban collector",
    "past a rest area",
    "on a gravel section",
    "near posted mile marker signage",
    "through a construction detour",
    "on a coastal parkway",
    "beside a railroad spur",
    "within a toll plaza approach",
];
const WEATHER: [&str; 18] = [
    "in clear weather",
    "during light rain",
    "after dark",
    "in dense fog",
    "at dusk",
    "on wet pavement",
    "under overcast skies",
    "in a heavy downpour",
    "during morning glare",
    "on patchy ice",
    "in blowing snow",
    "at dawn",
    "under clear night skies",
    "in gusty crosswinds",
    "during a hail shower",
    "on drifted slush",
    "in freezing drizzle",
    "amid drifting smoke",
];

/// MANCOLL ids round-robined by the generator, Unknown excluded.
const MANCOLL_CYCLE: [&str; 6] = ["0", "1", "2", "4", "5", "6"];

fn mancoll_actions(label: &str) -> &'static [&'static str] {
    match label {
        "0" => &[
            "departed the roadway and struck a tree",
            "ran off the road and collided with a utility pole",
            "left the roadway and overturned in a ditch",
            "exited the travel lane and struck an embankment",
        ],
        "1" => &[
            "failed to slow and struck the rear of V2",
            "struck the rear of V2, which was stopped for traffic",
            "impacted the rear of V2 as traffic ahead braked",
        ],
        "2" => &[
            "crossed the centerline and struck V2 head on",
            "drifted across the center of the road and collided head on with V2",
        ],
        "4" => &[
            "entered the junction and struck the side of V2 at an angle",
            "was struck at an angle by V2 while crossing the junction",
        ],
        "5" => &[
            "drifted from its lane and sideswiped V2 while both traveled in the same direction",
            "made contact with the side of V2 while both vehicles moved in the same direction",
        ],
        "6" => &[
            "crossed the center line and sideswiped V2 traveling in the opposite direction",
            "made side contact with V2, which was traveling in the opposite direction",
        ],
        "9" => &[
            "was involved in a collision with V2 under circumstances that remain undetermined",
            "collided with V2; the manner of the impact is undetermined from the file",
        ],
        other => unreachable!("no MANCOLL templates for {other}"),
    }
}

fn mancoll_distractor(label: &str) -> &'static str {
    match label {
        "0" => "V2 then left the roadway and struck a tree.",
        "1" => "V2 was then pushed into the rear of V3.",
        "2" => "V2 then struck V3 head on.",
        "4" => "V2 then struck V3 at an angle.",
        "5" => "V2 then sideswiped V3 while moving in the same direction.",
        "6" => "V2 then sideswiped V3, which was traveling in the opposite direction.",
        other => unreachable!("no distractor for {other}"),
    }
}

fn crashtype_single_action(code: &str) -> &'static [&'static str] {
    match code {
        "1" => &[
            "drove off the right side of the roadway and came to rest on the shoulder",
            "departed the right edge of the roadway and stopped on the grass",
        ],
        "2" => &[
            "lost control and departed the right side of the roadway",
            "lost traction and slid off the right side of the roadway",
        ],
        "6" => &[
            "drove off the left side of the roadway and stopped in the median",
            "departed the left edge of the roadway and came to rest in the median",
        ],
        "7" => &[
            "lost traction in a curve and ran off the left side of the roadway",
            "lost control and departed the left side of the roadway",
        ],
        other => unreachable!("no single-vehicle template for code {other}"),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, options: &[&'a str]) -> &'a str {
    options[rng.gen_range(0..options.len())]
}

fn intro<R: Rng>(rng: &mut R, subject: &str) -> String {
    format!(
        "{subject} was traveling {} {}.",
        pick(rng, &DIRECTIONS),
        pick(rng, &ROADS)
    )
}

fn closing<R: Rng>(rng: &mut R) -> String {
    format!("The crash occurred {}.", pick(rng, &WEATHER))
}

/// String-typed entry point matching the CLI surface.
pub fn generate_named(
    task: &str,
    n: usize,
    seed: u64,
    difficulty: Difficulty,
) -> Result<Vec<LabeledExample>, SynthError> {
    let task = match task {
        "mancoll" => Task::Mancoll,
        "crash_type" | "crashtype" => Task::CrashType,
        other => return Err(SynthError::UnknownTask(other.to_string())),
    };
    Ok(generate(task, n, seed, difficulty))
}

pub fn generate(task: Task, n: usize, seed: u64, difficulty: Difficulty) -> Vec<LabeledExample> {
    generate_with(task, n, seed, difficulty, &GenOptions::default())
}

pub fn generate_with(
    task: Task,
    n: usize,
    seed: u64,
    difficulty: Difficulty,
    options: &GenOptions,
) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    let mut case_index = 0usize;
    while examples.len() < n {
        let case_id = format!("synth-{}-{seed:08x}-{case_index:05}", task.as_str());
        match task {
            Task::Mancoll => {
                examples.push(mancoll_example(
                    &mut rng,
                    case_id,
                    case_index,
                    difficulty,
                    options,
                ));
            }
            Task::CrashType => {
                let case = crashtype_case(&mut rng, case_id, case_index, difficulty, options);
                examples.extend(case);
            }
        }
        case_index += 1;
    }
    examples.truncate(n);
    examples
}

fn mancoll_example<R: Rng>(
    rng: &mut R,
    case_id: String,
    case_index: usize,
    difficulty: Difficulty,
    options: &GenOptions,
) -> LabeledExample {
    let scheduled = MANCOLL_CYCLE[case_index % MANCOLL_CYCLE.len()];
    let label = if rng.gen::<f64>() < options.unknown_rate {
        "9"
    } else {
        scheduled
    };
    let action = pick(rng, mancoll_actions(label));
    let mut summary = format!("{} V1 {action}. {}", intro(rng, "V1"), closing(rng));
    let mut vehicle_count = if label == "0" { 1 } else { 2 };
    if difficulty == Difficulty::Intertwined {
        let others: Vec<&str> = MANCOLL_CYCLE.iter().filter(|c| **c != label).copied().collect();
        let distractor = others[rng.gen_range(0..others.len())];
        summary = format!(
            "{} V1 {action}. {} {}",
            intro(rng, "V1"),
            mancoll_distractor(distractor),
            closing(rng)
        );
        vehicle_count = 3;
    }
    LabeledExample {
        case_id,
        task: Task::Mancoll,
        year: options.year,
        summary,
        vehicle_index: None,
        crashconf: None,
        gold_label: LabelToken::new(label),
        vehicle_count,
    }
}

fn crashtype_case<R: Rng>(
    rng: &mut R,
    case_id: String,
    case_index: usize,
    difficulty: Difficulty,
    options: &GenOptions,
) -> Vec<LabeledExample> {
    let make = |summary: &str,
                vehicle_index: u32,
                conf: &str,
                code: &str,
                vehicle_count: u32| LabeledExample {
        case_id: case_id.clone(),
        task: Task::CrashType,
        year: options.year,
        summary: summary.to_string(),
        vehicle_index: Some(vehicle_index),
        crashconf: Some(conf.to_string()),
        gold_label: LabelToken::new(code),
        vehicle_count,
    };
    match difficulty {
        Difficulty::Plain => {
            let (code, conf) = match case_index % 4 {
                0 => ("1", "A"),
                1 => ("2", "A"),
                2 => ("6", "B"),
                _ => ("7", "B"),
            };
            let action = pick(rng, crashtype_single_action(code));
            let summary = format!("{} V1 {action}. {}", intro(rng, "V1"), closing(rng));
            vec![make(&summary, 1, conf, code, 1)]
        }
        Difficulty::Intertwined => match case_index % 3 {
            0 => {
                let summary = format!(
                    "{} V1 failed to slow and struck the rear of V2, which was moving slower in the lane ahead. {}",
                    intro(rng, "V1"),
                    closing(rng)
                );
                vec![
                    make(&summary, 1, "D", "24", 2),
                    make(&summary, 2, "D", "25", 2),
                ]
            }
            1 => {
                let summary = format!(
                    "{} V1 entered the intersection on a straight path and struck the left side of V2, which was crossing ahead. {}",
                    intro(rng, "V1"),
                    closing(rng)
                );
                vec![
                    make(&summary, 1, "L", "88", 2),
                    make(&summary, 2, "L", "89", 2),
                ]
            }
            _ => {
                let summary = format!(
                    "{} Traffic had slowed ahead. V1 struck the rear of V2, and V3 was unable to stop and struck the rear of V1. {}",
                    intro(rng, "V1"),
                    closing(rng)
                );
                vec![
                    make(&summary, 1, "D", "24", 3),
                    make(&summary, 2, "D", "25", 3),
                    make(&summary, 3, "M", "98", 3),
                ]
            }
        },
    }
}

fn summary_words(summary: &str) -> Vec<String> {
    summary
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Decision-list labeler over the template signal words. Exact on the
/// plain corpus; intentionally fallible on intertwined narratives.
pub fn keyword_oracle(example: &LabeledExample) -> LabelToken {
    let words = summary_words(&example.summary);
    let has = |w: &str| words.iter().any(|x| x == w);
    let label = match example.task {
        Task::Mancoll => {
            if has("undetermined") {
                "9"
            } else if has("rear") {
                "1"
            } else if has("head") {
                "2"
            } else if has("angle") {
                "4"
            } else if has("same") {
                "5"
            } else if has("opposite") {
                "6"
            } else {
                "0"
            }
        }
        Task::CrashType => {
            let index = example.vehicle_index.unwrap_or(1);
            if has("intersection") {
                if index == 1 {
                    "88"
                } else {
                    "89"
                }
            } else if has("rear") {
                match index {
                    1 => "24",
                    2 => "25",
                    _ => "98",
                }
            } else if has("lost") {
                if has("right") {
                    "2"
                } else {
                    "7"
                }
            } else if has("right") {
                "1"
            } else {
                "6"
            }
        }
    };
    LabelToken::new(label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::group_by_vehicle_count;
    use crate::taxonomy::Taxonomy;
    use std::collections::BTreeMap;

    #[test]
    fn generation_is_deterministic() {
        for task in [Task::Mancoll, Task::CrashType] {
            for difficulty in [Difficulty::Plain, Difficulty::Intertwined] {
                let a = generate(task, 200, 7, difficulty);
                let b = generate(task, 200, 7, difficulty);
                assert_eq!(a, b);
                let c = generate(task, 200, 8, difficulty);
                assert_ne!(a, c);
            }
        }
    }

    #[test]
    fn oracle_is_exact_on_plain() {
        for task in [Task::Mancoll, Task::CrashType] {
            let examples = generate(task, 600, 3, Difficulty::Plain);
            for ex in &examples {
                assert_eq!(
                    keyword_oracle(ex),
                    ex.gold_label,
                    "oracle missed {:?} for {:?}",
                    ex.gold_label,
                    ex.summary
                );
            }
        }
    }

    #[test]
    fn all_examples_validate_against_taxonomy() {
        for task in [Task::Mancoll, Task::CrashType] {
            for difficulty in [Difficulty::Plain, Difficulty::Intertwined] {
                for ex in generate(task, 300, 5, difficulty) {
                    ex.validate(Taxonomy::builtin()).unwrap();
                }
            }
        }
    }

    #[test]
    fn mancoll_histogram_is_near_uniform() {
        let examples = generate(Task::Mancoll, 1200, 11, Difficulty::Plain);
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        for ex in &examples {
            *counts.entry(ex.gold_label.as_str()).or_default() += 1.0;
        }
        let unknown = counts.remove("9").unwrap_or(0.0);
        assert_eq!(counts.len(), 6);
        let total: f64 = counts.values().sum();
        let expected = total / 6.0;
        let chi2: f64 = counts
            .values()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 11.07, "chi-square {chi2} too large: {counts:?}");
        let rate = unknown / examples.len() as f64;
        assert!(
            (0.004..=0.04).contains(&rate),
            "unknown rate {rate} out of range"
        );
    }

    #[test]
    fn intertwined_crashtype_pairs_disagree_per_vehicle() {
        let examples = generate(Task::CrashType, 30, 2, Difficulty::Intertwined);
        let mut by_case: BTreeMap<&str, Vec<&LabeledExample>> = BTreeMap::new();
        for ex in &examples {
            by_case.entry(&ex.case_id).or_default().push(ex);
        }
        let mut saw_rear_pair = false;
        let mut saw_chain = false;
        for (_, group) in by_case {
            if group.len() < 2 {
                continue;
            }
            assert!(group.windows(2).all(|w| w[0].summary == w[1].summary));
            let golds: Vec<&str> = group.iter().map(|e| e.gold_label.as_str()).collect();
            if golds == ["24", "25"] {
                saw_rear_pair = true;
                assert_eq!(group[0].vehicle_index, Some(1));
                assert_eq!(group[1].vehicle_index, Some(2));
            }
            if golds == ["24", "25", "98"] {
                saw_chain = true;
            }
        }
        assert!(saw_rear_pair, "no striking/struck rear-end pair generated");
        assert!(saw_chain, "no third-vehicle chain generated");
    }

    #[test]
    fn covered_codes_match_the_documented_set() {
        let mut seen: Vec<String> = Vec::new();
        for difficulty in [Difficulty::Plain, Difficulty::Intertwined] {
            for ex in generate(Task::CrashType, 400, 9, difficulty) {
                if !seen.contains(&ex.gold_label.as_str().to_string()) {
                    seen.push(ex.gold_label.as_str().to_string());
                }
            }
        }
        seen.sort_by_key(|c| c.parse::<u32>().unwrap());
        assert_eq!(seen, ["1", "2", "6", "7", "24", "25", "88", "89", "98"]);
    }

    #[test]
    fn vehicle_count_buckets_are_populated() {
        let mut examples = generate(Task::Mancoll, 300, 4, Difficulty::Plain);
        examples.extend(generate(Task::Mancoll, 60, 4, Difficulty::Intertwined));
        let buckets = group_by_vehicle_count(&examples);
        let sizes = buckets.sizes();
        assert!(sizes[0] > 0 && sizes[1] > 0 && sizes[2] > 0);
        assert_eq!(buckets.total(), examples.len());
    }

    #[test]
    fn unknown_task_name_is_rejected() {
        assert!(matches!(
            generate_named("vibes", 10, 0, Difficulty::Plain),
            Err(SynthError::UnknownTask(_))
        ));
        assert!(generate_named("mancoll", 10, 0, Difficulty::Plain).is_ok());
        assert!("intertwined".parse::<Difficulty>().is_ok());
        assert!("hard".parse::<Difficulty>().is_err());
    }
}
