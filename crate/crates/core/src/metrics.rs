//! Threshold-free detector metrics: AUROC, FPR@95 and AUPR.
//!
//! Positives are correct (faithful) responses and scores are oriented so that
//! higher means "more likely correct". A sample is predicted positive at
//! threshold `tau` iff `score >= tau`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::record::ScoreRecord;

/// (score, is_positive) pairs for one detector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledScoreSet {
    pub detector: String,
    pub entries: Vec<(f64, bool)>,
}

impl LabeledScoreSet {
    pub fn new(detector: impl Into<String>, entries: Vec<(f64, bool)>) -> Self {
        LabeledScoreSet {
            detector: detector.into(),
            entries,
        }
    }

    /// Builds a set from separate positive and negative score lists.
    pub fn from_classes(detector: impl Into<String>, pos: &[f64], neg: &[f64]) -> Self {
        let entries = pos
            .iter()
            .map(|&s| (s, true))
            .chain(neg.iter().map(|&s| (s, false)))
            .collect();
        LabeledScoreSet::new(detector, entries)
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.entries.iter().filter(|e| e.1).count();
        (pos, self.entries.len() - pos)
    }

    fn check(&self, need_negatives: bool) -> Result<(usize, usize), MetricError> {
        if let Some(i) = self.entries.iter().position(|e| !e.0.is_finite()) {
            return Err(MetricError::NonFiniteScore(i));
        }
        let (pos, neg) = self.counts();
        if need_negatives && (pos == 0 || neg == 0) {
            return Err(MetricError::NeedBothClasses);
        }
        if pos == 0 {
            return Err(MetricError::NoPositives);
        }
        Ok((pos, neg))
    }

    /// Groups of tied scores as `(positives, negatives)`, in descending score order.
    fn descending_groups(&self) -> Vec<(u64, u64)> {
        let mut sorted: Vec<(f64, bool)> = self.entries.clone();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut groups: Vec<(u64, u64)> = Vec::new();
        let mut last: Option<f64> = None;
        for (score, positive) in sorted {
            if last != Some(score) {
                groups.push((0, 0));
                last = Some(score);
            }
            let g = groups.last_mut().unwrap();
            if positive {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// How AUROC credits a tied positive/negative pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieCredit {
    #[default]
    Half,
    /// Strict `s_pos > s_neg` indicator; ties earn nothing.
    Strict,
}

/// Probability that a random positive outranks a random negative, ties
/// credited one half.
pub fn auroc(set: &LabeledScoreSet) -> Result<f64, MetricError> {
    auroc_with(set, TieCredit::Half)
}

pub fn auroc_with(set: &LabeledScoreSet, ties: TieCredit) -> Result<f64, MetricError> {
    let (pos, neg) = set.check(true)?;
    // Counted in half-pair units so the result is one exact division.
    let mut half_units: u64 = 0;
    let mut neg_below: u64 = 0;
    for (p, n) in set.descending_groups().into_iter().rev() {
        half_units += 2 * p * neg_below;
        if ties == TieCredit::Half {
            half_units += p * n;
        }
        neg_below += n;
    }
    Ok(half_units as f64 / (2 * pos as u64 * neg as u64) as f64)
}

/// False positive rate at the threshold whose recall is closest to 95%.
///
/// Candidate thresholds are the distinct scores. Distances to 0.95 are
/// compared exactly as `|20 TP - 19 P|`; ties prefer higher recall, then
/// lower FPR.
pub fn fpr_at_95(set: &LabeledScoreSet) -> Result<f64, MetricError> {
    let (pos, neg) = set.check(true)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(u64, u64, u64)> = None; // (distance, tp, fp)
    for (p, n) in set.descending_groups() {
        tp += p;
        fp += n;
        let dist = (20 * tp).abs_diff(19 * pos as u64);
        let better = match best {
            None => true,
            Some((bd, btp, bfp)) => {
                (dist, std::cmp::Reverse(tp), fp) < (bd, std::cmp::Reverse(btp), bfp)
            }
        };
        if better {
            best = Some((dist, tp, fp));
        }
    }
    let (_, _, fp) = best.expect("at least one threshold");
    Ok(fp as f64 / neg as f64)
}

/// Average precision: `sum (R_n - R_{n-1}) * P_n` over descending thresholds,
/// tied scores forming one step.
pub fn aupr(set: &LabeledScoreSet) -> Result<f64, MetricError> {
    let (pos, _) = set.check(false)?;
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0f64);
    for (p, n) in set.descending_groups() {
        let prev_tp = tp;
        tp += p;
        fp += n;
        ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
    }
    Ok(ap)
}

/// Metric row for one detector, values in percent rounded to 2 decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub detector: String,
    pub auroc: f64,
    pub fpr95: f64,
    pub aupr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by detector name.
    pub rows: Vec<EvalRow>,
    /// Trace ids left out for lacking a correct/hallucinated label.
    pub excluded: Vec<String>,
    /// Detectors without both classes among their scored records.
    pub skipped: Vec<String>,
}

pub fn to_percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

/// Evaluates every detector present in the records' oriented scores.
pub fn evaluate_detectors(records: &[ScoreRecord]) -> Result<EvalReport, MetricError> {
    let mut report = EvalReport::default();
    let mut labeled = Vec::new();
    for r in records {
        match r.label.and_then(|l| l.is_positive()) {
            Some(positive) => labeled.push((r, positive)),
            None => report.excluded.push(r.trace_id.clone()),
        }
    }
    if labeled.is_empty() {
        return Err(MetricError::NoLabeledRecords);
    }
    if !labeled.iter().any(|l| l.1) || labeled.iter().all(|l| l.1) {
        return Err(MetricError::NeedBothClasses);
    }

    let mut detectors: Vec<_> = labeled
        .iter()
        .flat_map(|(r, _)| r.oriented.keys().copied())
        .collect();
    detectors.sort_by_key(|d| d.name());
    detectors.dedup();

    for det in detectors {
        let entries: Vec<(f64, bool)> = labeled
            .iter()
            .filter_map(|(r, positive)| r.oriented(det).map(|s| (s, *positive)))
            .collect();
        let set = LabeledScoreSet::new(det.name(), entries);
        let (n_pos, n_neg) = set.counts();
        if n_pos == 0 || n_neg == 0 {
            report.skipped.push(det.name().to_owned());
            continue;
        }
        report.rows.push(EvalRow {
            detector: det.name().to_owned(),
            auroc: to_percent(auroc(&set)?),
            fpr95: to_percent(fpr_at_95(&set)?),
            aupr: to_percent(aupr(&set)?),
            n_pos,
            n_neg,
        });
    }
    Ok(report)
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "detector,auroc,fpr95,aupr,n_pos,n_neg";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.2},{:.2},{:.2},{},{}",
                r.detector, r.auroc, r.fpr95, r.aupr, r.n_pos, r.n_neg
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, detector: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.detector == detector)
    }
}
