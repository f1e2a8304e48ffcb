//! CISS-style table ingestion: loads CRASH and GV extracts from
//! delimited files, joins vehicles to crashes, and materializes the
//! labeled examples the rest of the pipeline consumes. Bad rows land in
//! a rejects channel with reason codes instead of aborting the load.

use crate::taxonomy::{LabelToken, Task, Taxonomy, UNKNOWN_MANCOLL_ID};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const MIN_YEAR: u16 = 2017;
pub const MAX_YEAR: u16 = 2023;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing table {0} (looked for {0}.csv in the input directory)")]
    MissingTable(&'static str),
    #[error("table {table} is missing column {column}")]
    MissingColumn { table: &'static str, column: String },
    #[error("table {table} row {row}: {problem}")]
    MalformedRow {
        table: &'static str,
        row: usize,
        problem: String,
    },
    #[error("duplicate case id {0} in CRASH")]
    DuplicateCase(String),
    #[error("{count} vehicle rows reference unknown case ids (strict mode)")]
    JoinOrphans { count: usize },
    #[error("train and test year are both {0}; the split must use two different years")]
    SameYearSplit(u16),
    #[error("no examples for year {0}")]
    EmptySplit(u16),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("example file line {line}: {source}")]
    ExampleDecode {
        line: usize,
        source: serde_json::Error,
    },
}

/// Column-name mapping for the two input tables, defaulting to the
/// CISS export names. Override via a small TOML file when a year's
/// extract renames columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub crash_case_id: String,
    pub crash_year: String,
    pub crash_summary: String,
    pub crash_mancoll: String,
    pub vehicle_case_id: String,
    pub vehicle_index: String,
    pub vehicle_crashconf: String,
    pub vehicle_crashtype: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            crash_case_id: "CASEID".into(),
            crash_year: "YEAR".into(),
            crash_summary: "SUMMARY".into(),
            crash_mancoll: "MANCOLL".into(),
            vehicle_case_id: "CASEID".into(),
            vehicle_index: "VEHNO".into(),
            vehicle_crashconf: "CRASHCONF".into(),
            vehicle_crashtype: "CRASHTYPE".into(),
        }
    }
}

impl ColumnMap {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| IngestError::MalformedRow {
            table: "column map",
            row: 0,
            problem: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub case_id: String,
    pub year: u16,
    pub summary: String,
    pub mancoll: Option<LabelToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub case_id: String,
    pub vehicle_index: u32,
    pub crashconf: Option<String>,
    pub crashtype: Option<LabelToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub crash: CrashRecord,
    pub vehicles: Vec<VehicleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinOrphan {
    pub case_id: String,
    pub vehicle_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSet {
    pub cases: Vec<Case>,
    pub orphans: Vec<JoinOrphan>,
}

/// One task-ready example. `vehicle_index` and `crashconf` are present
/// exactly when the task is CRASHTYPE; `year` travels along so splits
/// can be made downstream of ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub case_id: String,
    pub task: Task,
    pub year: u16,
    pub summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vehicle_index: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crashconf: Option<String>,
    pub gold_label: LabelToken,
    pub vehicle_count: u32,
}

impl LabeledExample {
    /// Checks the task-conditional field shape and gold-label validity.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<(), String> {
        if self.summary.trim().is_empty() {
            return Err("empty summary".into());
        }
        if self.vehicle_count == 0 {
            return Err("vehicle_count must be at least 1".into());
        }
        match self.task {
            Task::Mancoll => {
                if self.vehicle_index.is_some() || self.crashconf.is_some() {
                    return Err("MANCOLL examples must not carry vehicle fields".into());
                }
                if !taxonomy.mancoll_tokens().contains(&self.gold_label) {
                    return Err(format!("{} is not a MANCOLL id", self.gold_label));
                }
            }
            Task::CrashType => {
                let conf = match (&self.vehicle_index, &self.crashconf) {
                    (Some(_), Some(conf)) => conf,
                    _ => return Err("CRASHTYPE examples need vehicle_index and crashconf".into()),
                };
                let candidates = taxonomy
                    .candidate_set_for(conf)
                    .map_err(|e| e.to_string())?;
                if !candidates.iter().any(|c| c.code == self.gold_label.as_str()) {
                    return Err(format!(
                        "code {} is outside configuration {conf}",
                        self.gold_label
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingLabel,
    MissingConfiguration,
    UnknownConfiguration,
    PartitionMismatch,
    EmptySummary,
    BadYear,
    NoVehicles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub case_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vehicle_index: Option<u32>,
    pub reason: RejectReason,
}

fn open_table(dir: &Path, name: &'static str) -> Result<csv::Reader<File>, IngestError> {
    for candidate in [format!("{name}.csv"), format!("{}.csv", name.to_lowercase())] {
        let path = dir.join(candidate);
        if path.exists() {
            return Ok(csv::ReaderBuilder::new()
                .flexible(false)
                .from_reader(File::open(path)?));
        }
    }
    Err(IngestError::MissingTable(name))
}

fn column_index(
    headers: &csv::StringRecord,
    table: &'static str,
    column: &str,
) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(column))
        .ok_or_else(|| IngestError::MissingColumn {
            table,
            column: column.to_string(),
        })
}

fn non_empty(field: &str) -> Option<&str> {
    let trimmed = field.trim();
    (!trimmed.is_empty()).then_some(trimmed)
}

/// Loads CRASH.csv and GV.csv from `dir` and joins vehicles onto their
/// crashes. Orphaned vehicle rows are reported in the result; in strict
/// mode any orphan fails the load.
pub fn load_case_set(
    dir: &Path,
    columns: &ColumnMap,
    strict: bool,
) -> Result<CaseSet, IngestError> {
    let mut crash_reader = open_table(dir, "CRASH")?;
    let headers = crash_reader.headers()?.clone();
    let ci_case = column_index(&headers, "CRASH", &columns.crash_case_id)?;
    let ci_year = column_index(&headers, "CRASH", &columns.crash_year)?;
    let ci_summary = column_index(&headers, "CRASH", &columns.crash_summary)?;
    let ci_mancoll = column_index(&headers, "CRASH", &columns.crash_mancoll)?;

    let mut order: Vec<String> = Vec::new();
    let mut by_case: BTreeMap<String, Case> = BTreeMap::new();
    for (row, record) in crash_reader.records().enumerate() {
        let record = record?;
        let case_id = non_empty(&record[ci_case])
            .ok_or_else(|| IngestError::MalformedRow {
                table: "CRASH",
                row: row + 2,
                problem: "empty case id".into(),
            })?
            .to_string();
        let year: u16 = record[ci_year]
            .trim()
            .parse()
            .map_err(|_| IngestError::MalformedRow {
                table: "CRASH",
                row: row + 2,
                problem: format!("unparseable year {:?}", &record[ci_year]),
            })?;
        let crash = CrashRecord {
            case_id: case_id.clone(),
            year,
            summary: record[ci_summary].trim().to_string(),
            mancoll: non_empty(&record[ci_mancoll]).map(LabelToken::new),
        };
        if by_case
            .insert(
                case_id.clone(),
                Case {
                    crash,
                    vehicles: Vec::new(),
                },
            )
            .is_some()
        {
            return Err(IngestError::DuplicateCase(case_id));
        }
        order.push(case_id);
    }

    let mut gv_reader = open_table(dir, "GV")?;
    let headers = gv_reader.headers()?.clone();
    let vi_case = column_index(&headers, "GV", &columns.vehicle_case_id)?;
    let vi_index = column_index(&headers, "GV", &columns.vehicle_index)?;
    let vi_conf = column_index(&headers, "GV", &columns.vehicle_crashconf)?;
    let vi_type = column_index(&headers, "GV", &columns.vehicle_crashtype)?;

    let mut orphans = Vec::new();
    for (row, record) in gv_reader.records().enumerate() {
        let record = record?;
        let case_id = record[vi_case].trim().to_string();
        let vehicle_index: u32 =
            record[vi_index]
                .trim()
                .parse()
                .map_err(|_| IngestError::MalformedRow {
                    table: "GV",
                    row: row + 2,
                    problem: format!("unparseable vehicle number {:?}", &record[vi_index]),
                })?;
        let vehicle = VehicleRecord {
            case_id: case_id.clone(),
            vehicle_index,
            crashconf: non_empty(&record[vi_conf]).map(str::to_string),
            crashtype: non_empty(&record[vi_type]).map(LabelToken::new),
        };
        match by_case.get_mut(&case_id) {
            Some(case) => case.vehicles.push(vehicle),
            None => orphans.push(JoinOrphan {
                case_id,
                vehicle_index,
            }),
        }
    }
    if strict && !orphans.is_empty() {
        return Err(IngestError::JoinOrphans {
            count: orphans.len(),
        });
    }

    let mut cases: Vec<Case> = order
        .into_iter()
        .map(|id| by_case.remove(&id).expect("inserted above"))
        .collect();
    for case in &mut cases {
        case.vehicles.sort_by_key(|v| v.vehicle_index);
    }
    Ok(CaseSet { cases, orphans })
}

/// Materializes task examples from a case set. MANCOLL yields one
/// example per crash; CRASHTYPE yields one per vehicle that carries a
/// configuration. Anything that cannot become a valid example goes to
/// the rejects list with a reason code.
pub fn build_examples(
    cases: &CaseSet,
    task: Task,
    taxonomy: &Taxonomy,
) -> (Vec<LabeledExample>, Vec<Reject>) {
    let mut examples = Vec::new();
    let mut rejects = Vec::new();
    for case in &cases.cases {
        let crash = &case.crash;
        let reject = |reason, vehicle_index: Option<u32>| Reject {
            case_id: crash.case_id.clone(),
            vehicle_index,
            reason,
        };
        if crash.summary.trim().is_empty() {
            rejects.push(reject(RejectReason::EmptySummary, None));
            continue;
        }
        if !(MIN_YEAR..=MAX_YEAR).contains(&crash.year) {
            rejects.push(reject(RejectReason::BadYear, None));
            continue;
        }
        if case.vehicles.is_empty() {
            rejects.push(reject(RejectReason::NoVehicles, None));
            continue;
        }
        let vehicle_count = case.vehicles.len() as u32;
        match task {
            Task::Mancoll => {
                let Some(mancoll) = &crash.mancoll else {
                    rejects.push(reject(RejectReason::MissingLabel, None));
                    continue;
                };
                if !taxonomy.mancoll_tokens().contains(mancoll) {
                    rejects.push(reject(RejectReason::PartitionMismatch, None));
                    continue;
                }
                examples.push(LabeledExample {
                    case_id: crash.case_id.clone(),
                    task,
                    year: crash.year,
                    summary: crash.summary.clone(),
                    vehicle_index: None,
                    crashconf: None,
                    gold_label: mancoll.clone(),
                    vehicle_count,
                });
            }
            Task::CrashType => {
                for vehicle in &case.vehicles {
                    let idx = Some(vehicle.vehicle_index);
                    let Some(conf) = &vehicle.crashconf else {
                        rejects.push(reject(RejectReason::MissingConfiguration, idx));
                        continue;
                    };
                    let Some(code) = &vehicle.crashtype else {
                        rejects.push(reject(RejectReason::MissingLabel, idx));
                        continue;
                    };
                    let Ok(candidates) = taxonomy.candidate_set_for(conf) else {
                        rejects.push(reject(RejectReason::UnknownConfiguration, idx));
                        continue;
                    };
                    if !candidates.iter().any(|c| c.code == code.as_str()) {
                        rejects.push(reject(RejectReason::PartitionMismatch, idx));
                        continue;
                    }
                    examples.push(LabeledExample {
                        case_id: crash.case_id.clone(),
                        task,
                        year: crash.year,
                        summary: crash.summary.clone(),
                        vehicle_index: idx,
                        crashconf: Some(conf.clone()),
                        gold_label: code.clone(),
                        vehicle_count,
                    });
                }
            }
        }
    }
    (examples, rejects)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub excluded: usize,
}

/// Year-disjoint split. Both years must be distinct and non-empty;
/// examples from other years are counted but not returned.
pub fn split_by_year(
    examples: &[LabeledExample],
    train_year: u16,
    test_year: u16,
) -> Result<Split, IngestError> {
    if train_year == test_year {
        return Err(IngestError::SameYearSplit(train_year));
    }
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
        excluded: 0,
    };
    for ex in examples {
        if ex.year == train_year {
            split.train.push(ex.clone());
        } else if ex.year == test_year {
            split.test.push(ex.clone());
        } else {
            split.excluded += 1;
        }
    }
    if split.train.is_empty() {
        return Err(IngestError::EmptySplit(train_year));
    }
    if split.test.is_empty() {
        return Err(IngestError::EmptySplit(test_year));
    }
    Ok(split)
}

/// The four vehicle-count buckets: exactly one, two, three, and more
/// than three vehicles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VehicleCountBuckets {
    pub one: Vec<LabeledExample>,
    pub two: Vec<LabeledExample>,
    pub three: Vec<LabeledExample>,
    pub more: Vec<LabeledExample>,
}

impl VehicleCountBuckets {
    pub fn sizes(&self) -> [usize; 4] {
        [
            self.one.len(),
            self.two.len(),
            self.three.len(),
            self.more.len(),
        ]
    }

    pub fn total(&self) -> usize {
        self.sizes().iter().sum()
    }
}

pub fn group_by_vehicle_count(examples: &[LabeledExample]) -> VehicleCountBuckets {
    let mut buckets = VehicleCountBuckets::default();
    for ex in examples {
        match ex.vehicle_count {
            0 => unreachable!("validated vehicle_count >= 1"),
            1 => buckets.one.push(ex.clone()),
            2 => buckets.two.push(ex.clone()),
            3 => buckets.three.push(ex.clone()),
            _ => buckets.more.push(ex.clone()),
        }
    }
    buckets
}

/// Canonical example file: one JSON record per line.
pub fn write_examples(examples: &[LabeledExample], path: &Path) -> Result<(), IngestError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(|e| IngestError::ExampleDecode {
            line: 0,
            source: e,
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<LabeledExample>, IngestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(
            serde_json::from_str(&line).map_err(|e| IngestError::ExampleDecode {
                line: i + 1,
                source: e,
            })?,
        );
    }
    Ok(examples)
}

pub fn write_rejects(rejects: &[Reject], path: &Path) -> Result<(), IngestError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for r in rejects {
        serde_json::to_writer(&mut out, r).map_err(|e| IngestError::ExampleDecode {
            line: 0,
            source: e,
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Convenience guard used by evaluation paths that exclude gold
/// Unknown records.
pub fn is_unknown_mancoll(label: &LabelToken) -> bool {
    label.as_str() == UNKNOWN_MANCOLL_ID.to_string()
}
