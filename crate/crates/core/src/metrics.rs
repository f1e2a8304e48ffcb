//! Evaluation metrics over prediction records: accuracy with label
//! exclusion, macro F1, inter-run agreement, consistency matrices,
//! label distributions with Jensen-Shannon divergence, and rank
//! correlation (tie-corrected Kendall tau and Spearman rho).

use crate::backend::{Predicted, PredictionRecord};
use crate::taxonomy::LabelToken;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records left to score")]
    EmptyInput,
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {0} is outside the declared support")]
    UnknownLabel(LabelToken),
    #[error("distributions are defined over different supports")]
    SupportMismatch,
    #[error("need at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate variance: all {0} values tie")]
    DegenerateVariance(&'static str),
    #[error("participant {0} appears twice in the consistency input")]
    DuplicateParticipant(String),
}

fn usable<'a>(
    records: &'a [PredictionRecord],
    exclude: &BTreeSet<LabelToken>,
) -> Vec<&'a PredictionRecord> {
    records
        .iter()
        .filter(|r| !r.dropped && !exclude.contains(&r.gold))
        .collect()
}

/// Share of records whose prediction equals the gold label. Records with
/// an excluded gold label leave both numerator and denominator; invalid
/// predictions count as wrong.
pub fn accuracy(
    records: &[PredictionRecord],
    exclude: &BTreeSet<LabelToken>,
) -> Result<f64, MetricsError> {
    let kept = usable(records, exclude);
    if kept.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = kept
        .iter()
        .filter(|r| r.predicted.label() == Some(&r.gold))
        .count();
    Ok(correct as f64 / kept.len() as f64)
}

fn f1_for_class(kept: &[&PredictionRecord], class: &LabelToken) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for r in kept {
        let hit = r.predicted.label() == Some(class);
        let gold = &r.gold == class;
        match (hit, gold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Macro F1 averaged over the categories present in the gold labels
/// (after exclusion). Categories the gold never uses do not dilute the
/// mean; use [`macro_f1_over`] for the fixed-support convention.
pub fn macro_f1(
    records: &[PredictionRecord],
    exclude: &BTreeSet<LabelToken>,
) -> Result<f64, MetricsError> {
    let kept = usable(records, exclude);
    if kept.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let classes: BTreeSet<&LabelToken> = kept.iter().map(|r| &r.gold).collect();
    let sum: f64 = classes.iter().map(|c| f1_for_class(&kept, c)).sum();
    Ok(sum / classes.len() as f64)
}

/// Macro F1 averaged over every label in `support` (minus exclusions),
/// whether or not the gold labels use it.
pub fn macro_f1_over(
    records: &[PredictionRecord],
    exclude: &BTreeSet<LabelToken>,
    support: &[LabelToken],
) -> Result<f64, MetricsError> {
    let kept = usable(records, exclude);
    if kept.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let classes: Vec<&LabelToken> = support.iter().filter(|c| !exclude.contains(c)).collect();
    if classes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let sum: f64 = classes.iter().map(|c| f1_for_class(&kept, c)).sum();
    Ok(sum / classes.len() as f64)
}

/// Position-wise agreement between two prediction sequences. An invalid
/// prediction never matches anything, including another invalid one.
pub fn agreement(a: &[Predicted], b: &[Predicted]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let matches = a
        .iter()
        .zip(b)
        .filter(|(x, y)| match (x, y) {
            (Predicted::Label(lx), Predicted::Label(ly)) => lx == ly,
            _ => false,
        })
        .count();
    Ok(matches as f64 / a.len() as f64)
}

/// One participant in a consistency analysis: two independent runs over
/// the same example sequence. Ground truth participates as a constant
/// sequence (both runs identical), which makes its diagonal 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRuns {
    pub id: String,
    pub run1: Vec<Predicted>,
    pub run2: Vec<Predicted>,
}

impl ConsistencyRuns {
    pub fn new(id: impl Into<String>, run1: Vec<Predicted>, run2: Vec<Predicted>) -> Self {
        ConsistencyRuns {
            id: id.into(),
            run1,
            run2,
        }
    }

    pub fn ground_truth(id: impl Into<String>, labels: &[LabelToken]) -> Self {
        let run: Vec<Predicted> = labels.iter().cloned().map(Predicted::Label).collect();
        ConsistencyRuns {
            id: id.into(),
            run1: run.clone(),
            run2: run,
        }
    }

    /// Keeps only the positions where `keep` is true, for excluded-label
    /// variants of the analysis.
    pub fn retain_positions(&self, keep: &[bool]) -> ConsistencyRuns {
        let filter = |run: &[Predicted]| {
            run.iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(p, _)| p.clone())
                .collect()
        };
        ConsistencyRuns {
            id: self.id.clone(),
            run1: filter(&self.run1),
            run2: filter(&self.run2),
        }
    }
}

/// Square agreement matrix. Diagonal entries are self-agreement between
/// a participant's two runs; off-diagonal entries are cross agreement
/// between first runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    pub ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn consistency_matrix(
    participants: &[ConsistencyRuns],
) -> Result<ConsistencyMatrix, MetricsError> {
    if participants.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut seen = BTreeSet::new();
    for p in participants {
        if !seen.insert(p.id.as_str()) {
            return Err(MetricsError::DuplicateParticipant(p.id.clone()));
        }
    }
    let n = participants.len();
    let len = participants[0].run1.len();
    for p in participants {
        for run in [&p.run1, &p.run2] {
            if run.len() != len {
                return Err(MetricsError::LengthMismatch {
                    left: len,
                    right: run.len(),
                });
            }
        }
    }
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = agreement(&participants[i].run1, &participants[i].run2)?;
        for j in (i + 1)..n {
            let v = agreement(&participants[i].run1, &participants[j].run1)?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(ConsistencyMatrix {
        ids: participants.iter().map(|p| p.id.clone()).collect(),
        values,
    })
}

impl ConsistencyMatrix {
    fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Mean of the strictly-upper-triangle entries over the selected
    /// participants: the overall consistency summary.
    pub fn overall(&self, ids: &[&str]) -> Result<f64, MetricsError> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| MetricsError::UnknownLabel(LabelToken::new(*id)))
            })
            .collect::<Result<_, _>>()?;
        if idx.len() < 2 {
            return Err(MetricsError::TooFewPairs(idx.len()));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for a in 0..idx.len() {
            for b in (a + 1)..idx.len() {
                sum += self.values[idx[a]][idx[b]];
                count += 1;
            }
        }
        Ok(sum / count as f64)
    }

    pub fn overall_all(&self) -> Result<f64, MetricsError> {
        let ids: Vec<&str> = self.ids.iter().map(String::as_str).collect();
        self.overall(&ids)
    }

    /// Overall consistency with one participant (typically ground truth)
    /// left out.
    pub fn overall_without(&self, excluded: &str) -> Result<f64, MetricsError> {
        let ids: Vec<&str> = self
            .ids
            .iter()
            .map(String::as_str)
            .filter(|id| *id != excluded)
            .collect();
        self.overall(&ids)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("participant");
        for id in &self.ids {
            out.push('\t');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for v in &self.values[i] {
                out.push_str(&format!("\t{v:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Empirical distribution of labels over a fixed support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub support: Vec<LabelToken>,
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
}

pub fn label_distribution(
    labels: &[LabelToken],
    support: &[LabelToken],
) -> Result<LabelDistribution, MetricsError> {
    if labels.is_empty() || support.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let index: BTreeMap<&LabelToken, usize> =
        support.iter().enumerate().map(|(i, t)| (t, i)).collect();
    let mut counts = vec![0u64; support.len()];
    for label in labels {
        let i = index
            .get(label)
            .copied()
            .ok_or_else(|| MetricsError::UnknownLabel(label.clone()))?;
        counts[i] += 1;
    }
    let total = labels.len() as f64;
    let probs = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(LabelDistribution {
        support: support.to_vec(),
        counts,
        probs,
    })
}

/// Jensen-Shannon divergence in bits (base-2 logarithm), bounded to
/// [0, 1], with the 0 * log(0/x) = 0 convention.
pub fn js_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64, MetricsError> {
    if p.support != q.support {
        return Err(MetricsError::SupportMismatch);
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            total += 0.5 * pi * (pi / mi).log2();
        }
        if qi > 0.0 {
            total += 0.5 * qi * (qi / mi).log2();
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

fn tied_pair_count(values: &mut [f64]) -> u64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..values.len() {
        if values[i] == values[i - 1] {
            run += 1;
        } else {
            total += choose2(run);
            run = 1;
        }
    }
    total + choose2(run)
}

fn merge_count(ys: &mut Vec<f64>) -> u64 {
    let n = ys.len();
    if n < 2 {
        return 0;
    }
    let mut buf = ys.clone();
    merge_count_rec(ys, &mut buf, 0, n)
}

fn merge_count_rec(ys: &mut [f64], buf: &mut [f64], lo: usize, hi: usize) -> u64 {
    if hi - lo < 2 {
        return 0;
    }
    let mid = (lo + hi) / 2;
    let mut inversions = merge_count_rec(ys, buf, lo, mid) + merge_count_rec(ys, buf, mid, hi);
    let (mut i, mut j, mut k) = (lo, mid, lo);
    while i < mid && j < hi {
        if ys[i] <= ys[j] {
            buf[k] = ys[i];
            i += 1;
        } else {
            // ys[i] > ys[j]: every element left in the first half forms
            // an inversion with ys[j].
            inversions += (mid - i) as u64;
            buf[k] = ys[j];
            j += 1;
        }
        k += 1;
    }
    while i < mid {
        buf[k] = ys[i];
        i += 1;
        k += 1;
    }
    while j < hi {
        buf[k] = ys[j];
        j += 1;
        k += 1;
    }
    ys[lo..hi].copy_from_slice(&buf[lo..hi]);
    inversions
}

fn check_rank_input(pairs: &[(f64, f64)]) -> Result<(), MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewPairs(pairs.len()));
    }
    if pairs.iter().all(|(x, _)| *x == pairs[0].0) {
        return Err(MetricsError::DegenerateVariance("x"));
    }
    if pairs.iter().all(|(_, y)| *y == pairs[0].1) {
        return Err(MetricsError::DegenerateVariance("y"));
    }
    Ok(())
}

/// Tie-corrected Kendall rank correlation (tau-b) via sort and
/// merge-count rather than pairwise enumeration.
pub fn kendall_tau_b(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    check_rank_input(pairs)?;
    let n = pairs.len() as u64;
    let n0 = choose2(n);

    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite values")
            .then(a.1.partial_cmp(&b.1).expect("finite values"))
    });

    let mut ties_x = 0u64;
    let mut ties_xy = 0u64;
    let mut run_x = 1u64;
    let mut run_xy = 1u64;
    for i in 1..sorted.len() {
        if sorted[i].0 == sorted[i - 1].0 {
            run_x += 1;
            if sorted[i].1 == sorted[i - 1].1 {
                run_xy += 1;
            } else {
                ties_xy += choose2(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += choose2(run_x);
            ties_xy += choose2(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += choose2(run_x);
    ties_xy += choose2(run_xy);

    let mut ys: Vec<f64> = sorted.iter().map(|(_, y)| *y).collect();
    let mut ys_for_ties = ys.clone();
    let ties_y = tied_pair_count(&mut ys_for_ties);
    let discordant = merge_count(&mut ys);

    // Pairs untied in both coordinates split into concordant and
    // discordant; inclusion-exclusion recovers the concordant count.
    let untied = n0 - ties_x - ties_y + ties_xy;
    let concordant = untied - discordant;
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    Ok((concordant as f64 - discordant as f64) / denom)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    check_rank_input(pairs)?;
    let xs: Vec<f64> = pairs.iter().map(|(x, _)| *x).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, y)| *y).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let n = pairs.len() as f64;
    let mean_x = rx.iter().sum::<f64>() / n;
    let mean_y = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..pairs.len() {
        let dx = rx[i] - mean_x;
        let dy = ry[i] - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(MetricsError::DegenerateVariance("x"));
    }
    if var_y == 0.0 {
        return Err(MetricsError::DegenerateVariance("y"));
    }
    Ok(cov / (var_x * var_y).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(gold: &str, pred: Option<&str>) -> PredictionRecord {
        PredictionRecord {
            example_id: "x".into(),
            backend_id: "test".into(),
            run_index: 1,
            predicted: match pred {
                Some(p) => Predicted::Label(LabelToken::from(p)),
                None => Predicted::Invalid,
            },
            gold: LabelToken::from(gold),
            latency_ms: 0,
            dropped: false,
            error: None,
        }
    }

    fn no_exclusion() -> BTreeSet<LabelToken> {
        BTreeSet::new()
    }

    #[test]
    fn accuracy_counts_invalid_as_wrong() {
        let records = vec![
            record("1", Some("1")),
            record("1", None),
            record("2", Some("1")),
            record("2", Some("2")),
        ];
        assert_eq!(accuracy(&records, &no_exclusion()).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_exclusion_removes_denominator_mass() {
        let records = vec![
            record("1", Some("1")),
            record("9", Some("1")),
            record("9", Some("9")),
            record("2", Some("1")),
        ];
        let mut exclude = BTreeSet::new();
        exclude.insert(LabelToken::from("9"));
        assert_eq!(accuracy(&records, &exclude).unwrap(), 0.5);
        assert_eq!(accuracy(&records, &no_exclusion()).unwrap(), 0.5);
        exclude.insert(LabelToken::from("1"));
        exclude.insert(LabelToken::from("2"));
        assert!(matches!(
            accuracy(&records, &exclude),
            Err(MetricsError::EmptyInput)
        ));
    }

    #[test]
    fn macro_f1_hand_case() {
        // predictions [0, 0, 1, 1] against gold [0, 1, 0, 1]: both
        // classes get precision = recall = 0.5, so macro F1 = 0.5.
        let records = vec![
            record("0", Some("0")),
            record("1", Some("0")),
            record("0", Some("1")),
            record("1", Some("1")),
        ];
        let v = macro_f1(&records, &no_exclusion()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_single_predicted_category() {
        // Everything predicted as "1" while gold uses three categories:
        // only class 1 scores nonzero, and the mean runs over the three
        // gold-present classes.
        let records = vec![
            record("1", Some("1")),
            record("1", Some("1")),
            record("2", Some("1")),
            record("4", Some("1")),
        ];
        let v = macro_f1(&records, &no_exclusion()).unwrap();
        let f1_class1 = 2.0 * 0.5 * 1.0 / 1.5;
        assert!((v - f1_class1 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_over_fixed_support_dilutes() {
        let records = vec![record("1", Some("1")), record("2", Some("2"))];
        let support: Vec<LabelToken> =
            ["0", "1", "2", "4"].iter().map(|s| LabelToken::from(*s)).collect();
        let gold_present = macro_f1(&records, &no_exclusion()).unwrap();
        let full = macro_f1_over(&records, &no_exclusion(), &support).unwrap();
        assert!((gold_present - 1.0).abs() < 1e-12);
        assert!((full - 0.5).abs() < 1e-12);
    }

    #[test]
    fn agreement_invalid_never_matches() {
        let a = vec![
            Predicted::Label(LabelToken::from("1")),
            Predicted::Invalid,
            Predicted::Label(LabelToken::from("2")),
        ];
        let b = vec![
            Predicted::Label(LabelToken::from("1")),
            Predicted::Invalid,
            Predicted::Label(LabelToken::from("4")),
        ];
        let v = agreement(&a, &b).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert!((agreement(&a, &a).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn agreement_length_mismatch() {
        let a = vec![Predicted::Invalid];
        assert!(matches!(
            agreement(&a, &[]),
            Err(MetricsError::LengthMismatch { left: 1, right: 0 })
        ));
    }

    #[test]
    fn consistency_ground_truth_diagonal_is_one() {
        let labels: Vec<LabelToken> = ["1", "2", "4"].iter().map(|s| LabelToken::from(*s)).collect();
        let gt = ConsistencyRuns::ground_truth("GT", &labels);
        let model = ConsistencyRuns::new(
            "m",
            vec![
                Predicted::Label(LabelToken::from("1")),
                Predicted::Label(LabelToken::from("2")),
                Predicted::Label(LabelToken::from("2")),
            ],
            vec![
                Predicted::Label(LabelToken::from("1")),
                Predicted::Label(LabelToken::from("2")),
                Predicted::Label(LabelToken::from("4")),
            ],
        );
        let matrix = consistency_matrix(&[gt, model]).unwrap();
        assert_eq!(matrix.values[0][0], 1.0);
        assert!((matrix.values[1][1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(matrix.values[0][1], matrix.values[1][0]);
        assert!((matrix.values[0][1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_rejects_duplicates_and_ragged_runs() {
        let labels: Vec<LabelToken> = ["1"].iter().map(|s| LabelToken::from(*s)).collect();
        let a = ConsistencyRuns::ground_truth("a", &labels);
        assert!(matches!(
            consistency_matrix(&[a.clone(), a.clone()]),
            Err(MetricsError::DuplicateParticipant(_))
        ));
        let mut b = ConsistencyRuns::ground_truth("b", &labels);
        b.run2.push(Predicted::Invalid);
        assert!(matches!(
            consistency_matrix(&[a, b]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn label_distribution_counts_and_rejects_strays() {
        let support: Vec<LabelToken> = ["1", "2"].iter().map(|s| LabelToken::from(*s)).collect();
        let labels: Vec<LabelToken> = ["1", "1", "2", "1"]
            .iter()
            .map(|s| LabelToken::from(*s))
            .collect();
        let dist = label_distribution(&labels, &support).unwrap();
        assert_eq!(dist.counts, vec![3, 1]);
        assert!((dist.probs[0] - 0.75).abs() < 1e-12);
        let stray: Vec<LabelToken> = ["7"].iter().map(|s| LabelToken::from(*s)).collect();
        assert!(matches!(
            label_distribution(&stray, &support),
            Err(MetricsError::UnknownLabel(_))
        ));
    }

    #[test]
    fn js_divergence_frozen_values() {
        let support: Vec<LabelToken> = ["a", "b"].iter().map(|s| LabelToken::from(*s)).collect();
        let dist = |probs: [f64; 2]| LabelDistribution {
            support: support.clone(),
            counts: vec![0, 0],
            probs: probs.to_vec(),
        };
        let same = js_divergence(&dist([0.5, 0.5]), &dist([0.5, 0.5])).unwrap();
        assert!(same.abs() < 1e-12);
        let disjoint = js_divergence(&dist([1.0, 0.0]), &dist([0.0, 1.0])).unwrap();
        assert!((disjoint - 1.0).abs() < 1e-12);
        let mixed = js_divergence(&dist([0.5, 0.5]), &dist([1.0, 0.0])).unwrap();
        assert!((mixed - 0.31128).abs() < 1e-5);
    }

    #[test]
    fn js_divergence_support_mismatch() {
        let a = LabelDistribution {
            support: vec![LabelToken::from("a")],
            counts: vec![1],
            probs: vec![1.0],
        };
        let b = LabelDistribution {
            support: vec![LabelToken::from("b")],
            counts: vec![1],
            probs: vec![1.0],
        };
        assert!(matches!(
            js_divergence(&a, &b),
            Err(MetricsError::SupportMismatch)
        ));
    }

    #[test]
    fn kendall_tau_b_tied_fixture() {
        // Pairs (1,1), (1,2), (2,2), (3,3): 4 concordant pairs, one tie
        // in x, one tie in y, so tau-b = 4 / sqrt(5 * 5) = 0.8.
        let pairs = [(1.0, 1.0), (1.0, 2.0), (2.0, 2.0), (3.0, 3.0)];
        let v = kendall_tau_b(&pairs).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn kendall_tau_b_perfect_orders() {
        let inc: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, i as f64 * 2.0)).collect();
        assert!((kendall_tau_b(&inc).unwrap() - 1.0).abs() < 1e-12);
        let dec: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, -(i as f64))).collect();
        assert!((kendall_tau_b(&dec).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_correlation_degenerate_inputs() {
        let flat_x = [(1.0, 1.0), (1.0, 2.0)];
        assert!(matches!(
            kendall_tau_b(&flat_x),
            Err(MetricsError::DegenerateVariance("x"))
        ));
        assert!(matches!(
            spearman(&flat_x),
            Err(MetricsError::DegenerateVariance("x"))
        ));
        assert!(matches!(
            kendall_tau_b(&[(1.0, 2.0)]),
            Err(MetricsError::TooFewPairs(1))
        ));
    }

    #[test]
    fn spearman_matches_hand_case() {
        let pairs = [(1.0, 2.0), (2.0, 1.0), (3.0, 4.0), (4.0, 3.0)];
        // Ranks equal values here; Pearson on them gives 0.6.
        let v = spearman(&pairs).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
    }
}
