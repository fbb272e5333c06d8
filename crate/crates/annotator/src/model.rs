use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use meshqa_core::labels::{AnnotationRecord, BinaryTagSet, QualityScore, Source, Tag, SCORE_HEAD};
use meshqa_core::ObjectMetadata;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AnnotatorConfig;
use crate::error::AnnotatorError;
use crate::network::{sigmoid, softmax, HeadOutputs, MetaNormalizer, Network, Views};

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `score_accuracy`, `relaxed_score_accuracy` and `<tag>_f1` on the
    /// validation split.
    pub val_metrics: BTreeMap<String, f64>,
}

/// Per-tag decision thresholds; tags without an entry use `default`.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub default: f64,
    pub per_tag: BTreeMap<Tag, f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { default: 0.5, per_tag: BTreeMap::new() }
    }
}

impl Thresholds {
    pub fn uniform(t: f64) -> Self {
        Self { default: t, per_tag: BTreeMap::new() }
    }

    pub fn get(&self, tag: Tag) -> f64 {
        self.per_tag.get(&tag).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAnnotator {
    pub config: AnnotatorConfig,
    pub normalizer: MetaNormalizer,
    pub history: Vec<EpochRecord>,
    pub(crate) params: Vec<f64>,
    pub(crate) net: Network,
}

impl TrainedAnnotator {
    /// Freshly initialised model, seeded from `config.seed`.
    pub fn init(config: &AnnotatorConfig) -> Result<Self, AnnotatorError> {
        let net = Network::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = net.init_params(&mut rng);
        Ok(Self { config: config.clone(), normalizer: MetaNormalizer::default(), history: Vec::new(), params, net })
    }

    pub fn from_parts(
        config: AnnotatorConfig,
        normalizer: MetaNormalizer,
        history: Vec<EpochRecord>,
        params: Vec<f64>,
    ) -> Result<Self, AnnotatorError> {
        let net = Network::new(&config)?;
        if params.len() != net.n_params() {
            return Err(AnnotatorError::ShapeMismatch(format!(
                "config needs {} parameters, got {}",
                net.n_params(),
                params.len()
            )));
        }
        Ok(Self { config, normalizer, history, params, net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward<'a>(&self, views: impl Into<Views<'a>>, meta: &ObjectMetadata) -> Result<HeadOutputs, AnnotatorError> {
        let z = self.normalizer.apply(meta);
        Ok(self.net.forward(&self.params, views.into(), &z)?.0)
    }

    pub fn predict<'a>(
        &self,
        object_id: &str,
        views: impl Into<Views<'a>>,
        meta: &ObjectMetadata,
        thresholds: &Thresholds,
        created_at: DateTime<Utc>,
    ) -> Result<AnnotationRecord, AnnotatorError> {
        let out = self.forward(views, meta)?;
        Ok(record_from_outputs(object_id, &out, thresholds, created_at))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Turns head outputs into a model-sourced record with confidences.
pub fn record_from_outputs(
    object_id: &str,
    out: &HeadOutputs,
    thresholds: &Thresholds,
    created_at: DateTime<Utc>,
) -> AnnotationRecord {
    let probs = softmax(&out.score_logits);
    let k = argmax(&probs);
    let mut confidences = BTreeMap::new();
    confidences.insert(SCORE_HEAD.to_string(), probs[k]);
    let mut tags = BinaryTagSet::default();
    for (tag, logit) in Tag::HEAD_ORDER.iter().zip(out.tag_logits) {
        let p = sigmoid(logit);
        tags.set(*tag, p >= thresholds.get(*tag));
        confidences.insert(tag.name().to_string(), p);
    }
    AnnotationRecord {
        object_id: object_id.to_string(),
        score: QualityScore::from_code(k as u8).expect("argmax over four classes"),
        tags,
        source: Source::Model,
        annotator_id: None,
        confidences: Some(confidences),
        created_at,
        batch_id: None,
        extra: serde_json::Map::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use meshqa_core::validate_record;

    fn at() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
    }

    fn outputs(score: [f64; 4], tags: [f64; 5]) -> HeadOutputs {
        HeadOutputs { score_logits: score, tag_logits: tags, attention_weights: vec![0.5, 0.5] }
    }

    #[test]
    fn dominant_logit() {
        let r = record_from_outputs("a", &outputs([10.0, 0.0, 0.0, 0.0], [0.0; 5]), &Thresholds::default(), at());
        assert_eq!(r.score, QualityScore::Low);
        assert!(r.confidences.as_ref().unwrap()["score"] >= 0.999);
    }

    #[test]
    fn boundary_is_positive() {
        let r = record_from_outputs("a", &outputs([0.0; 4], [0.0, -1e-9, 0.0, 0.0, 0.0]), &Thresholds::default(), at());
        assert!(r.tags.is_multi_object);
        assert!(!r.tags.is_scene);
        // uniform scores resolve to the lowest code
        assert_eq!(r.score, QualityScore::Low);
    }

    #[test]
    fn per_tag_thresholds() {
        let mut th = Thresholds::default();
        th.per_tag.insert(Tag::IsFigure, 0.9);
        let r = record_from_outputs("a", &outputs([0.0; 4], [1.0; 5]), &th, at());
        assert!(!r.tags.is_figure);
        assert!(r.tags.is_scene);
    }

    #[test]
    fn predictions_conform_to_schema() {
        for logits in [[1e4, -1e4, 0.0, 3.0], [0.0; 4], [-2.0, 5.0, 5.0, 1.0]] {
            let r = record_from_outputs("obj-1", &outputs(logits, [900.0, -900.0, 0.0, 2.0, -3.0]), &Thresholds::default(), at());
            assert_eq!(validate_record(&r), vec![]);
        }
    }
}
