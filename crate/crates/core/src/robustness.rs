//! Label-noise injection, nested subsampling, and resumable sweeps over
//! a noise or training-size axis. The harness owns data preparation and
//! journaling; actual training happens behind the `SweepRunner` trait.

use crate::ingest::LabeledExample;
use crate::model::TrainConfig;
use crate::taxonomy::LabelToken;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const MAX_NOISE_RATIO: f64 = 0.4;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("noise ratio {0} outside [0, {MAX_NOISE_RATIO}]")]
    RatioOutOfRange(f64),
    #[error("requested sample of {requested} from {available} examples")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("label space must contain at least two labels to inject noise")]
    LabelSpaceTooSmall,
    #[error("sweep has no points")]
    EmptyPoints,
    #[error("train size point {0} is not a positive integer")]
    BadSizePoint(f64),
    #[error("sweep needs a non-empty training pool")]
    EmptyPool,
    #[error("sweep training config: {0}")]
    BadTrainConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {source}")]
    JournalDecode {
        line: usize,
        source: serde_json::Error,
    },
}

/// Replaces the gold labels of exactly `floor(ratio * n)` uniformly
/// chosen examples with a uniformly random different label from
/// `space`. Returns the noisy copy and the sorted changed-index list.
pub fn inject_label_noise(
    examples: &[LabeledExample],
    ratio: f64,
    seed: u64,
    space: &[LabelToken],
) -> Result<(Vec<LabeledExample>, Vec<usize>), RobustnessError> {
    inject_label_noise_with(examples, ratio, seed, space, false)
}

/// Like `inject_label_noise`, but when `include_original` is set the
/// replacement is drawn from the whole space, so a chosen example may
/// keep its label while still appearing in the changed-index list.
pub fn inject_label_noise_with(
    examples: &[LabeledExample],
    ratio: f64,
    seed: u64,
    space: &[LabelToken],
    include_original: bool,
) -> Result<(Vec<LabeledExample>, Vec<usize>), RobustnessError> {
    if !(0.0..=MAX_NOISE_RATIO).contains(&ratio) {
        return Err(RobustnessError::RatioOutOfRange(ratio));
    }
    if space.len() < 2 {
        return Err(RobustnessError::LabelSpaceTooSmall);
    }
    let n = examples.len();
    let k = (ratio * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut changed: Vec<usize> = indices[..k].to_vec();
    changed.sort_unstable();

    let mut noisy = examples.to_vec();
    for &idx in &changed {
        let original = noisy[idx].gold_label.clone();
        let replacement = if include_original {
            space[rng.gen_range(0..space.len())].clone()
        } else {
            let others: Vec<&LabelToken> = space.iter().filter(|l| **l != original).collect();
            if others.is_empty() {
                return Err(RobustnessError::LabelSpaceTooSmall);
            }
            others[rng.gen_range(0..others.len())].clone()
        };
        noisy[idx].gold_label = replacement;
    }
    Ok((noisy, changed))
}

/// Seeded sample of `n` examples without replacement. Prefix of a
/// seeded permutation, so for a fixed seed the `n1 < n2` samples nest:
/// `subsample(.., n1, s)` equals the first `n1` rows of
/// `subsample(.., n2, s)`.
pub fn subsample(
    examples: &[LabeledExample],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>, RobustnessError> {
    let len = examples.len();
    if n > len {
        return Err(RobustnessError::SampleTooLarge {
            requested: n,
            available: len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.gen_range(i..len);
        indices.swap(i, j);
    }
    Ok(indices[..n].iter().map(|&i| examples[i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NoiseRatio,
    TrainSize,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::NoiseRatio => "noise_ratio",
            SweepAxis::TrainSize => "train_size",
        }
    }
}

pub fn default_repetitions() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub points: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub train: TrainConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), RobustnessError> {
        if self.points.is_empty() {
            return Err(RobustnessError::EmptyPoints);
        }
        for &p in &self.points {
            match self.axis {
                SweepAxis::NoiseRatio => {
                    if !(0.0..=MAX_NOISE_RATIO).contains(&p) {
                        return Err(RobustnessError::RatioOutOfRange(p));
                    }
                }
                SweepAxis::TrainSize => {
                    if p < 1.0 || p.fract() != 0.0 {
                        return Err(RobustnessError::BadSizePoint(p));
                    }
                }
            }
        }
        self.train
            .validate()
            .map_err(|e| RobustnessError::BadTrainConfig(e.to_string()))?;
        Ok(())
    }

    /// Content hash of the spec; journal rows carry it so a journal can
    /// only resume the sweep it was written for.
    pub fn spec_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// One training-and-evaluation run at a prepared sweep point.
pub trait SweepRunner {
    fn run_point(
        &self,
        train: &[LabeledExample],
        test: &[LabeledExample],
        config: &TrainConfig,
        seed: u64,
    ) -> Result<PointMetrics, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRow {
    pub spec_hash: String,
    pub point_index: usize,
    pub axis_value: f64,
    pub repetition: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PointMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub repetition: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PointMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub axis_value: f64,
    /// Means over the repetitions that succeeded; absent if none did.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_macro_f1: Option<f64>,
    pub reps: Vec<RepOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    pub axis: SweepAxis,
    pub spec_hash: String,
    pub points: Vec<CurvePoint>,
}

impl CurveData {
    /// Plot-ready table: one row per (point, repetition) plus the mean.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("axis\tvalue\trepetition\taccuracy\tmacro_f1\n");
        for point in &self.points {
            for rep in &point.reps {
                match &rep.metrics {
                    Some(m) => out.push_str(&format!(
                        "{}\t{}\t{}\t{:.6}\t{:.6}\n",
                        self.axis.as_str(),
                        point.axis_value,
                        rep.repetition,
                        m.accuracy,
                        m.macro_f1
                    )),
                    None => out.push_str(&format!(
                        "{}\t{}\t{}\terror\terror\n",
                        self.axis.as_str(),
                        point.axis_value,
                        rep.repetition
                    )),
                }
            }
            if let (Some(acc), Some(f1)) = (point.mean_accuracy, point.mean_macro_f1) {
                out.push_str(&format!(
                    "{}\t{}\tmean\t{acc:.6}\t{f1:.6}\n",
                    self.axis.as_str(),
                    point.axis_value
                ));
            }
        }
        out
    }
}

/// Deterministic per-(point, repetition) seed, derived from the spec
/// hash so every rerun of the same spec sees the same data and
/// initialization.
fn rep_seed(spec_hash: &str, point_index: usize, repetition: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(spec_hash.as_bytes());
    hasher.update((point_index as u64).to_le_bytes());
    hasher.update((repetition as u64).to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

fn load_journal(
    path: &Path,
    spec_hash: &str,
) -> Result<BTreeMap<(usize, usize), JournalRow>, RobustnessError> {
    let mut rows = BTreeMap::new();
    if !path.exists() {
        return Ok(rows);
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JournalRow =
            serde_json::from_str(&line).map_err(|e| RobustnessError::JournalDecode {
                line: i + 1,
                source: e,
            })?;
        if row.spec_hash == spec_hash {
            rows.insert((row.point_index, row.repetition), row);
        }
    }
    Ok(rows)
}

fn append_journal(path: &Path, row: &JournalRow) -> Result<(), RobustnessError> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(row).expect("journal row serializes");
    file.write_all(line.as_bytes())?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

/// Runs the sweep, preparing training data per point and delegating the
/// train-and-evaluate step to `runner`. A journal path makes the sweep
/// resumable: completed (point, repetition) cells are reused, fresh
/// results are appended as they finish, and a failed point is recorded
/// without stopping the rest of the sweep. The test pool is passed
/// through untouched.
pub fn run_sweep(
    spec: &SweepSpec,
    train_pool: &[LabeledExample],
    test_pool: &[LabeledExample],
    runner: &dyn SweepRunner,
    journal: Option<&Path>,
) -> Result<CurveData, RobustnessError> {
    spec.validate()?;
    if train_pool.is_empty() {
        return Err(RobustnessError::EmptyPool);
    }
    let spec_hash = spec.spec_hash();
    let mut done = match journal {
        Some(path) => load_journal(path, &spec_hash)?,
        None => BTreeMap::new(),
    };
    let space: Vec<LabelToken> =
        crate::taxonomy::Taxonomy::builtin().label_space(train_pool[0].task);

    let mut points = Vec::with_capacity(spec.points.len());
    for (i, &value) in spec.points.iter().enumerate() {
        let mut reps = Vec::with_capacity(spec.repetitions);
        for r in 0..spec.repetitions {
            let seed = rep_seed(&spec_hash, i, r);
            let row = match done.remove(&(i, r)) {
                Some(row) => row,
                None => {
                    let prepared = match spec.axis {
                        SweepAxis::NoiseRatio => {
                            inject_label_noise(train_pool, value, seed, &space).map(|(d, _)| d)
                        }
                        // One seed for every size point keeps the
                        // samples nested along the axis.
                        SweepAxis::TrainSize => subsample(train_pool, value as usize, spec.seed),
                    };
                    let outcome = match prepared {
                        Ok(train) => runner.run_point(&train, test_pool, &spec.train, seed),
                        Err(e) => Err(e.to_string()),
                    };
                    let row = JournalRow {
                        spec_hash: spec_hash.clone(),
                        point_index: i,
                        axis_value: value,
                        repetition: r,
                        seed,
                        metrics: outcome.as_ref().ok().copied(),
                        error: outcome.err(),
                    };
                    if let Some(path) = journal {
                        append_journal(path, &row)?;
                    }
                    row
                }
            };
            reps.push(RepOutcome {
                repetition: r,
                seed: row.seed,
                metrics: row.metrics,
                error: row.error,
            });
        }
        let ok: Vec<&PointMetrics> = reps.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let (mean_accuracy, mean_macro_f1) = if ok.is_empty() {
            (None, None)
        } else {
            let n = ok.len() as f64;
            (
                Some(ok.iter().map(|m| m.accuracy).sum::<f64>() / n),
                Some(ok.iter().map(|m| m.macro_f1).sum::<f64>() / n),
            )
        };
        points.push(CurvePoint {
            axis_value: value,
            mean_accuracy,
            mean_macro_f1,
            reps,
        });
    }
    Ok(CurveData {
        axis: spec.axis,
        spec_hash,
        points,
    })
}
