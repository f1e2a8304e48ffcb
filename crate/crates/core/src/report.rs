//! Report assembly: evaluation summaries with paired All / -Unknown
//! rows, comparison against published baselines, and the distribution
//! and pair-correlation analyses.

use crate::backend::PredictionRecord;
use crate::metrics::{
    accuracy, js_divergence, kendall_tau_b, label_distribution, macro_f1, LabelDistribution,
    MetricsError,
};
use crate::taxonomy::{LabelToken, Task, Taxonomy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("baseline file: {0}")]
    Baselines(String),
    #[error("baseline row {row} ({model}) has no table citation")]
    MissingCitation { row: usize, model: String },
    #[error("no prediction records to report on")]
    NoRecords,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Version and seed stamp attached to every report artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub template_version: String,
    pub taxonomy_version: String,
    pub config_digest: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(
        template_version: impl Into<String>,
        taxonomy_version: impl Into<String>,
        config_digest: impl Into<String>,
        seed: u64,
    ) -> Self {
        Stamp {
            template_version: template_version.into(),
            taxonomy_version: taxonomy_version.into(),
            config_digest: config_digest.into(),
            seed,
        }
    }
}

// --- evaluation reports ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// "All", or "-Unknown" when gold-Unknown records were excluded.
    pub subgroup: String,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub invalid: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub backend_id: String,
    pub stamp: Stamp,
    pub rows: Vec<EvalRow>,
}

fn eval_row(
    records: &[PredictionRecord],
    subgroup: &str,
    exclude: &BTreeSet<LabelToken>,
) -> Result<EvalRow, ReportError> {
    let kept: Vec<&PredictionRecord> = records
        .iter()
        .filter(|r| !r.dropped && !exclude.contains(&r.gold))
        .collect();
    Ok(EvalRow {
        subgroup: subgroup.to_string(),
        n: kept.len(),
        accuracy: accuracy(records, exclude)?,
        macro_f1: macro_f1(records, exclude)?,
        invalid: kept.iter().filter(|r| r.predicted.label().is_none()).count(),
        dropped: records.iter().filter(|r| r.dropped).count(),
    })
}

/// Builds the evaluation report. With `exclude_unknown` the report
/// carries the paired All and -Unknown rows.
pub fn evaluate(
    records: &[PredictionRecord],
    task: Task,
    exclude_unknown: bool,
    stamp: Stamp,
) -> Result<EvalReport, ReportError> {
    let first = records.first().ok_or(ReportError::NoRecords)?;
    let mut rows = vec![eval_row(records, "All", &BTreeSet::new())?];
    if exclude_unknown {
        let unknown = Taxonomy::builtin().unknown_mancoll_token();
        let exclude: BTreeSet<LabelToken> = [unknown].into();
        rows.push(eval_row(records, "-Unknown", &exclude)?);
    }
    Ok(EvalReport {
        task,
        backend_id: first.backend_id.clone(),
        stamp,
        rows,
    })
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("subgroup\tn\taccuracy\tmacro_f1\tinvalid\tdropped\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{}\t{}\n",
                row.subgroup, row.n, row.accuracy, row.macro_f1, row.invalid, row.dropped
            ));
        }
        out
    }
}

// --- published baselines ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperBaseline {
    pub model: String,
    /// Absent for untuned (Original) rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u32>,
    pub task: Task,
    pub subgroup: String,
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub citation: String,
}

#[derive(Debug, Deserialize)]
struct BaselineFile {
    #[serde(rename = "baseline")]
    baselines: Vec<PaperBaseline>,
}

const BUILTIN_BASELINES: &str = include_str!("../assets/paper_baselines.toml");

pub fn builtin_baselines() -> Result<Vec<PaperBaseline>, ReportError> {
    parse_baselines(BUILTIN_BASELINES)
}

pub fn load_baselines(path: &Path) -> Result<Vec<PaperBaseline>, ReportError> {
    parse_baselines(&std::fs::read_to_string(path)?)
}

fn parse_baselines(text: &str) -> Result<Vec<PaperBaseline>, ReportError> {
    let file: BaselineFile =
        toml::from_str(text).map_err(|e| ReportError::Baselines(e.to_string()))?;
    Ok(file.baselines)
}

/// Checks the baseline-fixture invariant: every row carries a table
/// citation.
pub fn lint_baselines(baselines: &[PaperBaseline]) -> Result<(), ReportError> {
    for (row, b) in baselines.iter().enumerate() {
        if b.citation.trim().is_empty() {
            return Err(ReportError::MissingCitation {
                row,
                model: b.model.clone(),
            });
        }
    }
    Ok(())
}

/// One line of the `report --against-baselines` table: our metric next
/// to a published row. Accuracy baselines are percentages, so the run
/// value is scaled to match before the delta is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub model: String,
    pub steps: Option<u32>,
    pub subgroup: String,
    pub metric: String,
    pub published: f64,
    pub ours: f64,
    pub delta: f64,
    pub citation: String,
}

fn run_value_for(metric: &str, row: &EvalRow) -> Option<f64> {
    match metric {
        "accuracy" => Some(row.accuracy * 100.0),
        "macro_f1" => Some(row.macro_f1),
        _ => None,
    }
}

/// Juxtaposes an evaluation report with the published rows for its
/// task, matching on subgroup and metric.
pub fn against_baselines(
    report: &EvalReport,
    baselines: &[PaperBaseline],
) -> Vec<BaselineComparison> {
    let mut comparisons = Vec::new();
    for b in baselines {
        if b.task != report.task {
            continue;
        }
        let Some(row) = report.rows.iter().find(|r| r.subgroup == b.subgroup) else {
            continue;
        };
        let Some(ours) = run_value_for(&b.metric, row) else {
            continue;
        };
        comparisons.push(BaselineComparison {
            model: b.model.clone(),
            steps: b.steps,
            subgroup: b.subgroup.clone(),
            metric: b.metric.clone(),
            published: b.value,
            ours,
            delta: ours - b.value,
            citation: b.citation.clone(),
        });
    }
    comparisons
}

// --- unknown-resolution analysis ---

/// Where predictions land on gold-Unknown cases. The two historically
/// low-mass categories are surfaced as named fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownAnalysis {
    pub total_gold_unknown: usize,
    pub resolved: usize,
    pub still_unknown: usize,
    pub invalid: usize,
    pub distribution: LabelDistribution,
    pub head_on_share: f64,
    pub sideswipe_opposite_share: f64,
}

pub fn analyze_unknown(records: &[PredictionRecord]) -> Result<UnknownAnalysis, ReportError> {
    let taxonomy = Taxonomy::builtin();
    let unknown = taxonomy.unknown_mancoll_token();
    let on_unknown: Vec<&PredictionRecord> = records
        .iter()
        .filter(|r| !r.dropped && r.gold == unknown)
        .collect();
    if on_unknown.is_empty() {
        return Err(ReportError::NoRecords);
    }
    let predicted: Vec<LabelToken> = on_unknown
        .iter()
        .filter_map(|r| r.predicted.label().cloned())
        .collect();
    let invalid = on_unknown.len() - predicted.len();
    let support = taxonomy.mancoll_tokens();
    let distribution = label_distribution(&predicted, &support)?;
    let share = |id: &str| {
        distribution
            .support
            .iter()
            .position(|l| l.as_str() == id)
            .map(|i| distribution.probs[i])
            .unwrap_or(0.0)
    };
    let head_on_share = share("2");
    let sideswipe_opposite_share = share("6");
    Ok(UnknownAnalysis {
        total_gold_unknown: on_unknown.len(),
        resolved: predicted.iter().filter(|l| **l != unknown).count(),
        still_unknown: predicted.iter().filter(|l| **l == unknown).count(),
        invalid,
        distribution,
        head_on_share,
        sideswipe_opposite_share,
    })
}

// --- distribution analysis ---

/// The boxed-category pattern: a pair of codes where gold and predicted
/// mass shifted in opposite directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementaryShift {
    pub from: LabelToken,
    pub to: LabelToken,
    pub gt_delta: f64,
    pub predicted_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub support: Vec<LabelToken>,
    pub gt: LabelDistribution,
    pub predicted: LabelDistribution,
    pub js_divergence: f64,
    /// Code pairs whose mass moved complementarily between gold and
    /// prediction, largest movement first.
    pub shifts: Vec<ComplementaryShift>,
}

/// Minimum per-code probability movement before a complementary pair is
/// flagged.
pub const SHIFT_THRESHOLD: f64 = 0.01;

pub fn analyze_distributions(
    gt: &[LabelToken],
    predicted: &[LabelToken],
    support: &[LabelToken],
) -> Result<DistributionReport, ReportError> {
    let gt_dist = label_distribution(gt, support)?;
    let pred_dist = label_distribution(predicted, support)?;
    let jsd = js_divergence(&gt_dist, &pred_dist)?;

    let deltas: Vec<f64> = gt_dist
        .probs
        .iter()
        .zip(&pred_dist.probs)
        .map(|(g, p)| p - g)
        .collect();
    let mut shifts = Vec::new();
    for i in 0..support.len() {
        for j in (i + 1)..support.len() {
            // Complementary: one code gained roughly what the other
            // lost, in opposite directions.
            let (di, dj) = (deltas[i], deltas[j]);
            if di.abs() >= SHIFT_THRESHOLD
                && dj.abs() >= SHIFT_THRESHOLD
                && di.signum() != dj.signum()
                && (di + dj).abs() <= 0.5 * di.abs().max(dj.abs())
            {
                let (from, to) = if di < 0.0 { (i, j) } else { (j, i) };
                shifts.push(ComplementaryShift {
                    from: support[from].clone(),
                    to: support[to].clone(),
                    gt_delta: deltas[from],
                    predicted_delta: deltas[to],
                });
            }
        }
    }
    shifts.sort_by(|a, b| {
        b.predicted_delta
            .abs()
            .partial_cmp(&a.predicted_delta.abs())
            .expect("finite deltas")
    });
    Ok(DistributionReport {
        support: support.to_vec(),
        gt: gt_dist,
        predicted: pred_dist,
        js_divergence: jsd,
        shifts,
    })
}

/// The single-vehicle support: codes 1 through 16.
pub fn single_vehicle_support() -> Vec<LabelToken> {
    (1..=16).map(|c| LabelToken::new(c.to_string())).collect()
}

// --- pair-correlation analysis ---

/// One two-vehicle case: gold and predicted codes for both vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub gt1: f64,
    pub gt2: f64,
    pub pred1: f64,
    pub pred2: f64,
}

/// Rank correlation between the two vehicles' labels, computed on gold
/// and on predictions. The report states the difference only; closer is
/// the quantity of interest, not higher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub n: usize,
    pub gt_tau: f64,
    pub predicted_tau: f64,
    pub abs_difference: f64,
}

pub fn analyze_pairs(rows: &[PairRow]) -> Result<PairReport, ReportError> {
    if rows.len() < 2 {
        return Err(ReportError::Metrics(MetricsError::TooFewPairs(rows.len())));
    }
    let gt: Vec<(f64, f64)> = rows.iter().map(|r| (r.gt1, r.gt2)).collect();
    let pred: Vec<(f64, f64)> = rows.iter().map(|r| (r.pred1, r.pred2)).collect();
    let gt_tau = kendall_tau_b(&gt)?;
    let predicted_tau = kendall_tau_b(&pred)?;
    Ok(PairReport {
        n: rows.len(),
        gt_tau,
        predicted_tau,
        abs_difference: (gt_tau - predicted_tau).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Predicted;

    fn record(gold: &str, predicted: Option<&str>) -> PredictionRecord {
        PredictionRecord {
            example_id: "x".into(),
            backend_id: "stub".into(),
            run_index: 1,
            predicted: match predicted {
                Some(p) => Predicted::Label(LabelToken::new(p)),
                None => Predicted::Invalid,
            },
            gold: LabelToken::new(gold),
            latency_ms: 0,
            dropped: false,
            error: None,
        }
    }

    fn stamp() -> Stamp {
        Stamp::new("t1", "x1", "cfg", 0)
    }

    #[test]
    fn evaluate_pairs_all_and_minus_unknown_rows() {
        let records = vec![
            record("1", Some("1")),
            record("1", Some("2")),
            record("9", Some("1")),
            record("9", Some("9")),
        ];
        let report = evaluate(&records, Task::Mancoll, true, stamp()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].subgroup, "All");
        assert_eq!(report.rows[0].n, 4);
        assert!((report.rows[0].accuracy - 0.5).abs() < 1e-12);
        assert_eq!(report.rows[1].subgroup, "-Unknown");
        assert_eq!(report.rows[1].n, 2);
        assert!((report.rows[1].accuracy - 0.5).abs() < 1e-12);

        let plain = evaluate(&records, Task::Mancoll, false, stamp()).unwrap();
        assert_eq!(plain.rows.len(), 1);
        let tsv = report.to_tsv();
        assert!(tsv.contains("-Unknown"));
    }

    #[test]
    fn builtin_baselines_parse_and_lint_clean() {
        let baselines = builtin_baselines().unwrap();
        assert!(baselines.len() > 200);
        lint_baselines(&baselines).unwrap();
        let anchor = baselines
            .iter()
            .find(|b| {
                b.model == "LLaMA3-8B"
                    && b.steps == Some(1668)
                    && b.subgroup == "All"
                    && b.metric == "accuracy"
            })
            .expect("anchor row present");
        assert_eq!(anchor.value, 96.1);
        assert_eq!(anchor.citation, "Table 3");

        let gpt4o_buckets: Vec<f64> = baselines
            .iter()
            .filter(|b| b.model == "GPT-4o" && b.task == Task::CrashType)
            .map(|b| b.value)
            .collect();
        assert_eq!(gpt4o_buckets, vec![45.3, 64.3, 58.8, 70.3]);

        let overall: Vec<f64> = baselines
            .iter()
            .filter(|b| b.metric == "consistency")
            .map(|b| b.value)
            .collect();
        assert_eq!(overall, vec![0.9443, 0.9438, 0.9502, 0.9508]);
    }

    #[test]
    fn lint_rejects_missing_citation() {
        let mut rows = builtin_baselines().unwrap();
        rows[3].citation = String::new();
        match lint_baselines(&rows) {
            Err(ReportError::MissingCitation { row: 3, .. }) => {}
            other => panic!("expected MissingCitation, got {other:?}"),
        }
    }

    #[test]
    fn comparison_scales_accuracy_to_percent() {
        let records = vec![record("1", Some("1")), record("2", Some("1"))];
        let report = evaluate(&records, Task::Mancoll, false, stamp()).unwrap();
        let baselines = vec![PaperBaseline {
            model: "LLaMA3-8B".into(),
            steps: Some(1668),
            task: Task::Mancoll,
            subgroup: "All".into(),
            metric: "accuracy".into(),
            value: 96.1,
            citation: "Table 3".into(),
        }];
        let rows = against_baselines(&report, &baselines);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].ours - 50.0).abs() < 1e-12);
        assert!((rows[0].delta - (50.0 - 96.1)).abs() < 1e-9);
    }

    #[test]
    fn unknown_analysis_reports_the_low_mass_categories() {
        let mut records = vec![
            record("9", Some("1")),
            record("9", Some("1")),
            record("9", Some("4")),
            record("9", Some("2")),
            record("9", Some("9")),
            record("9", None),
            record("1", Some("1")),
        ];
        records[5].dropped = false;
        let analysis = analyze_unknown(&records).unwrap();
        assert_eq!(analysis.total_gold_unknown, 6);
        assert_eq!(analysis.resolved, 4);
        assert_eq!(analysis.still_unknown, 1);
        assert_eq!(analysis.invalid, 1);
        assert!((analysis.head_on_share - 0.2).abs() < 1e-12);
        assert_eq!(analysis.sideswipe_opposite_share, 0.0);
    }

    #[test]
    fn identical_sequences_have_zero_divergence() {
        let support = single_vehicle_support();
        let labels: Vec<LabelToken> = (1..=16)
            .chain(1..=8)
            .map(|c| LabelToken::new(c.to_string()))
            .collect();
        let report = analyze_distributions(&labels, &labels, &support).unwrap();
        assert_eq!(report.js_divergence, 0.0);
        assert_eq!(report.gt, report.predicted);
        assert!(report.shifts.is_empty());
    }

    #[test]
    fn complementary_shift_is_flagged() {
        let support = single_vehicle_support();
        let code = |c: u32| LabelToken::new(c.to_string());
        // Gold puts mass on 1 and 6; predictions move most of it to 2
        // and 7, the lost-control twins.
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..40 {
            gt.push(code(1));
            pred.push(code(2));
        }
        for _ in 0..20 {
            gt.push(code(6));
            pred.push(code(7));
        }
        for c in [3, 4, 5, 8, 9, 10] {
            for _ in 0..10 {
                gt.push(code(c));
                pred.push(code(c));
            }
        }
        let report = analyze_distributions(&gt, &pred, &support).unwrap();
        assert!(report.js_divergence > 0.0);
        let pairs: Vec<(String, String)> = report
            .shifts
            .iter()
            .map(|s| (s.from.as_str().to_string(), s.to.as_str().to_string()))
            .collect();
        assert!(pairs.contains(&("1".to_string(), "2".to_string())));
        assert!(pairs.contains(&("6".to_string(), "7".to_string())));
    }

    #[test]
    fn pair_analysis_reports_difference_without_judgment() {
        let rows: Vec<PairRow> = (0..10)
            .map(|i| PairRow {
                gt1: i as f64,
                gt2: (i * 2) as f64,
                pred1: i as f64,
                pred2: (i * 2) as f64,
            })
            .collect();
        let report = analyze_pairs(&rows).unwrap();
        assert!((report.gt_tau - 1.0).abs() < 1e-12);
        assert_eq!(report.abs_difference, 0.0);

        let mixed: Vec<PairRow> = (0..10)
            .map(|i| PairRow {
                gt1: i as f64,
                gt2: (i * 2) as f64,
                pred1: i as f64,
                pred2: if i % 2 == 0 { 9.0 - i as f64 } else { i as f64 },
            })
            .collect();
        let report = analyze_pairs(&mixed).unwrap();
        assert!(report.abs_difference > 0.0);
        assert!(matches!(
            analyze_pairs(&rows[..1]),
            Err(ReportError::Metrics(MetricsError::TooFewPairs(1)))
        ));
    }
}
