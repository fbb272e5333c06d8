//! Combined score / tag loss in log-sum-exp form.

use meshqa_core::labels::{AnnotationRecord, Source, Tag};

use crate::config::HeadWeights;
use crate::error::AnnotatorError;
use crate::network::{sigmoid, softmax, HeadOutputs, SCORE_CLASSES, TAG_HEADS};

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// -log softmax(logits)[target]
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    (log_sum_exp(logits) - logits[target]).max(0.0)
}

/// -[y log sigmoid(x) + (1-y) log(1 - sigmoid(x))]
pub fn bce_with_logits(x: f64, y: bool) -> f64 {
    let t = if y { 1.0 } else { 0.0 };
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Training target extracted from a label record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub score: usize,
    /// In [`Tag::HEAD_ORDER`].
    pub tags: [bool; TAG_HEADS],
}

impl Target {
    pub fn from_record(record: &AnnotationRecord) -> Result<Self, AnnotatorError> {
        if record.source != Source::Human {
            return Err(AnnotatorError::NonHumanLabel { object_id: record.object_id.clone() });
        }
        Ok(Self { score: record.score.code() as usize, tags: Tag::HEAD_ORDER.map(|t| record.tags.get(t)) })
    }
}

/// Weighted loss and its gradient with respect to the logits.
pub fn loss_and_grad(
    score_logits: &[f64; SCORE_CLASSES],
    tag_logits: &[f64; TAG_HEADS],
    target: &Target,
    w: &HeadWeights,
) -> (f64, [f64; SCORE_CLASSES], [f64; TAG_HEADS]) {
    let mut loss = w.score * cross_entropy(score_logits, target.score);
    let p = softmax(score_logits);
    let mut dscore = [0.0; SCORE_CLASSES];
    for k in 0..SCORE_CLASSES {
        let y = if k == target.score { 1.0 } else { 0.0 };
        dscore[k] = w.score * (p[k] - y);
    }
    let mut dtag = [0.0; TAG_HEADS];
    for k in 0..TAG_HEADS {
        loss += w.tags[k] * bce_with_logits(tag_logits[k], target.tags[k]);
        let y = if target.tags[k] { 1.0 } else { 0.0 };
        dtag[k] = w.tags[k] * (sigmoid(tag_logits[k]) - y);
    }
    (loss, dscore, dtag)
}

/// Weighted categorical cross-entropy on the score head plus weighted
/// binary cross-entropy on each tag head.
pub fn compute_loss(outputs: &HeadOutputs, label: &AnnotationRecord, weights: &HeadWeights) -> Result<f64, AnnotatorError> {
    let target = Target::from_record(label)?;
    Ok(loss_and_grad(&outputs.score_logits, &outputs.tag_logits, &target, weights).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use meshqa_core::{BinaryTagSet, QualityScore};

    fn label(score: QualityScore, tags: BinaryTagSet) -> AnnotationRecord {
        AnnotationRecord::human("obj", score, tags, Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }

    fn outputs(score: [f64; 4], tags: [f64; 5]) -> HeadOutputs {
        HeadOutputs { score_logits: score, tag_logits: tags, attention_weights: vec![1.0] }
    }

    #[test]
    fn uniform_logits() {
        let l = compute_loss(&outputs([0.0; 4], [0.0; 5]), &label(QualityScore::Low, BinaryTagSet::default()), &HeadWeights::default())
            .unwrap();
        // independent arithmetic: -ln(1/4) - 5 ln(1/2)
        let expected = -(0.25f64).ln() - 5.0 * (0.5f64).ln();
        assert!((l - expected).abs() < 1e-9);
        assert!((l - 4.8520).abs() < 5e-5);
    }

    #[test]
    fn large_margin_goes_to_zero() {
        let tags = BinaryTagSet::from_bits(0b10101);
        let target = Target::from_record(&label(QualityScore::High, tags)).unwrap();
        let tl = target.tags.map(|t| if t { 60.0 } else { -60.0 });
        let l = compute_loss(&outputs([0.0, 0.0, 60.0, 0.0], tl), &label(QualityScore::High, tags), &HeadWeights::default())
            .unwrap();
        assert!(l >= 0.0 && l < 1e-20, "{l}");
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let l = compute_loss(
            &outputs([-1e4, 1e4, 0.0, 0.0], [1e4, -1e4, 800.0, -800.0, 0.0]),
            &label(QualityScore::Low, BinaryTagSet::from_bits(0b11111)),
            &HeadWeights::default(),
        )
        .unwrap();
        assert!(l.is_finite() && l > 1e4);
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let o = outputs([0.3, -1.2, 2.0, 0.1], [0.5, -0.5, 1.5, -2.0, 0.0]);
        let r = label(QualityScore::Medium, BinaryTagSet::from_bits(0b01001));
        let w = HeadWeights { score: 0.7, tags: [1.0, 0.5, 2.0, 0.0, 1.3] };
        let a = compute_loss(&o, &r, &w).unwrap();
        let b = compute_loss(&o, &r, &w.scaled(2.0)).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn model_labels_rejected() {
        let mut r = label(QualityScore::Low, BinaryTagSet::default());
        r.source = Source::Model;
        assert!(matches!(
            compute_loss(&outputs([0.0; 4], [0.0; 5]), &r, &HeadWeights::default()),
            Err(AnnotatorError::NonHumanLabel { .. })
        ));
    }

    #[test]
    fn logit_gradient_matches_differences() {
        let s = [0.3, -1.2, 2.0, 0.1];
        let t = [0.5, -0.5, 1.5, -2.0, 0.0];
        let target = Target { score: 1, tags: [true, false, false, true, true] };
        let w = HeadWeights { score: 1.5, tags: [1.0, 0.5, 2.0, 0.3, 1.0] };
        let (_, ds, dt) = loss_and_grad(&s, &t, &target, &w);
        let h = 1e-6;
        for k in 0..4 {
            let (mut a, mut b) = (s, s);
            a[k] += h;
            b[k] -= h;
            let num = (loss_and_grad(&a, &t, &target, &w).0 - loss_and_grad(&b, &t, &target, &w).0) / (2.0 * h);
            assert!((num - ds[k]).abs() < 1e-7);
        }
        for k in 0..5 {
            let (mut a, mut b) = (t, t);
            a[k] += h;
            b[k] -= h;
            let num = (loss_and_grad(&s, &a, &target, &w).0 - loss_and_grad(&s, &b, &target, &w).0) / (2.0 * h);
            assert!((num - dt[k]).abs() < 1e-7);
        }
    }
}
