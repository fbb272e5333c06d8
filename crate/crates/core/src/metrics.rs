//! Evaluation metrics for the annotation network: strict and relaxed score
//! accuracy, per-tag accuracy / F1 / average precision, and a consolidated
//! report.
//!
//! Average precision is the positive-class AP of each tag head: rank by
//! descending score (ties keep input order), then average the precision at
//! the rank of every positive.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::labels::{AnnotationRecord, QualityScore, Tag, SCORE_HEAD};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("score {0} outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("average precision undefined: no positive labels")]
    DegenerateClass,
    #[error("prediction for `{prediction}` paired with label for `{label}`")]
    ObjectMismatch { prediction: String, label: String },
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn score_accuracy(predictions: &[QualityScore], labels: &[QualityScore]) -> Result<f64, MetricError> {
    check_lengths(predictions.len(), labels.len())?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// True when the pair counts as correct under the relaxed rule, where HIGH
/// and SUPERIOR are interchangeable.
pub fn relaxed_match(prediction: QualityScore, label: QualityScore) -> bool {
    use QualityScore::{High, Superior};
    prediction == label || matches!((prediction, label), (High, Superior) | (Superior, High))
}

pub fn relaxed_score_accuracy(predictions: &[QualityScore], labels: &[QualityScore]) -> Result<f64, MetricError> {
    check_lengths(predictions.len(), labels.len())?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| relaxed_match(**p, **l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Counts at a decision threshold (score >= threshold is positive).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        (self.tp + self.tn) as f64 / n as f64
    }

    /// Positive-class F1; 0 when there are neither predicted nor actual
    /// positives.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn check_scores(scores: &[f64]) -> Result<(), MetricError> {
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(&s) => Err(MetricError::ScoreOutOfRange(s)),
        None => Ok(()),
    }
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(MetricError::DegenerateClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep their original order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TagMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub ap: f64,
}

pub fn binary_tag_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<TagMetrics, MetricError> {
    check_lengths(scores.len(), labels.len())?;
    check_scores(scores)?;
    let c = Confusion::at_threshold(scores, labels, threshold);
    Ok(TagMetrics { accuracy: c.accuracy(), f1: c.f1(), ap: average_precision(scores, labels)? })
}

/// Per-tag entry of an [`EvalReport`]. `ap` is absent when the evaluation
/// set has no positives for the tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TagReport {
    pub accuracy: f64,
    pub f1: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub score_accuracy: f64,
    pub relaxed_score_accuracy: f64,
    pub per_tag: BTreeMap<Tag, TagReport>,
    pub n_samples: usize,
    /// Rows are labels, columns predictions, both indexed by score code.
    pub confusion_4x4: [[usize; 4]; 4],
}

/// Probability the prediction assigns to `tag` being present. Model records
/// carry it in their confidences; anything else is treated as certain.
pub fn tag_probability(record: &AnnotationRecord, tag: Tag) -> f64 {
    record
        .confidences
        .as_ref()
        .and_then(|c| c.get(tag.name()).copied())
        .unwrap_or(if record.tags.get(tag) { 1.0 } else { 0.0 })
}

/// Builds a report from paired prediction/label records.
pub fn evaluate_records(
    predictions: &[AnnotationRecord],
    labels: &[AnnotationRecord],
    threshold: f64,
) -> Result<EvalReport, MetricError> {
    check_lengths(predictions.len(), labels.len())?;
    if let Some((p, l)) = predictions.iter().zip(labels).find(|(p, l)| p.object_id != l.object_id) {
        return Err(MetricError::ObjectMismatch { prediction: p.object_id.clone(), label: l.object_id.clone() });
    }
    let ps: Vec<_> = predictions.iter().map(|r| r.score).collect();
    let ls: Vec<_> = labels.iter().map(|r| r.score).collect();
    let mut confusion = [[0usize; 4]; 4];
    for (p, l) in ps.iter().zip(&ls) {
        confusion[l.code() as usize][p.code() as usize] += 1;
    }
    let mut per_tag = BTreeMap::new();
    for tag in Tag::HEAD_ORDER {
        let scores: Vec<f64> = predictions.iter().map(|r| tag_probability(r, tag)).collect();
        check_scores(&scores)?;
        let truth: Vec<bool> = labels.iter().map(|r| r.tags.get(tag)).collect();
        let c = Confusion::at_threshold(&scores, &truth, threshold);
        let ap = match average_precision(&scores, &truth) {
            Ok(ap) => Some(ap),
            Err(MetricError::DegenerateClass) => None,
            Err(e) => return Err(e),
        };
        per_tag.insert(tag, TagReport { accuracy: c.accuracy(), f1: c.f1(), ap });
    }
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        score_accuracy: score_accuracy(&ps, &ls)?,
        relaxed_score_accuracy: relaxed_score_accuracy(&ps, &ls)?,
        per_tag,
        n_samples: labels.len(),
        confusion_4x4: confusion,
    })
}

impl EvalReport {
    /// Plain-text table: one row per metric, columns Accuracy / F1 / mAP.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>9} {:>9} {:>9}", "Metric", "Accuracy", "F1 Score", "mAP");
        let _ = writeln!(out, "{:<24} {:>9.4} {:>9} {:>9}", format!("{SCORE_HEAD}*"), self.score_accuracy, "--", "--");
        let _ = writeln!(out, "{:<24} {:>9.4} {:>9} {:>9}", "relaxed score accuracy", self.relaxed_score_accuracy, "--", "--");
        for tag in Tag::HEAD_ORDER {
            if let Some(t) = self.per_tag.get(&tag) {
                let ap = t.ap.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into());
                let _ = writeln!(out, "{:<24} {:>9.4} {:>9.3} {:>9}", tag.name(), t.accuracy, t.f1, ap);
            }
        }
        let _ = writeln!(out, "n = {}", self.n_samples);
        out
    }
}
