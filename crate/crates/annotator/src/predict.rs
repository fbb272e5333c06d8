use chrono::{DateTime, Utc};
use meshqa_core::labels::AnnotationRecord;
use meshqa_core::metrics::{evaluate_records, EvalReport};
use rayon::prelude::*;

use crate::error::AnnotatorError;
use crate::model::{Thresholds, TrainedAnnotator};
use crate::train::Sample;

/// Anything that maps a sample to a model-sourced annotation.
pub trait Annotate: Sync {
    fn annotate(&self, sample: &Sample, thresholds: &Thresholds) -> Result<AnnotationRecord, AnnotatorError>;
}

/// [`TrainedAnnotator`] with a fixed `created_at` for its output records.
pub struct Annotator<'a> {
    pub model: &'a TrainedAnnotator,
    pub created_at: DateTime<Utc>,
}

impl Annotate for Annotator<'_> {
    fn annotate(&self, sample: &Sample, thresholds: &Thresholds) -> Result<AnnotationRecord, AnnotatorError> {
        self.model.predict(&sample.label.object_id, &sample.views, &sample.metadata, thresholds, self.created_at)
    }
}

pub fn predict_all(
    annotator: &impl Annotate,
    samples: &[Sample],
    thresholds: &Thresholds,
) -> Result<Vec<AnnotationRecord>, AnnotatorError> {
    samples.par_iter().map(|s| annotator.annotate(s, thresholds)).collect()
}

/// Predicts every sample and scores the predictions against the labels.
pub fn evaluate(annotator: &impl Annotate, samples: &[Sample], threshold: f64) -> Result<EvalReport, AnnotatorError> {
    let preds = predict_all(annotator, samples, &Thresholds::uniform(threshold))?;
    let labels: Vec<AnnotationRecord> = samples.iter().map(|s| s.label.clone()).collect();
    Ok(evaluate_records(&preds, &labels, threshold)?)
}
