//! Mini-batch training with a seeded validation split and best-checkpoint
//! selection.
//!
//! Per-sample gradients are computed in parallel and summed in sample
//! order, so results do not depend on the number of worker threads.

use std::collections::BTreeMap;

use meshqa_core::labels::{AnnotationRecord, QualityScore, Tag};
use meshqa_core::metrics::{relaxed_match, Confusion};
use meshqa_core::render::ViewStack;
use meshqa_core::ObjectMetadata;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{AnnotatorConfig, HeadWeights, OptimizerKind};
use crate::error::AnnotatorError;
use crate::loss::{loss_and_grad, Target};
use crate::model::{argmax, EpochRecord, TrainedAnnotator};
use crate::network::{sigmoid, MetaNormalizer, Network, Views};

/// Owned per-object view input.
#[derive(Debug, Clone)]
pub enum ViewInput {
    Images(ViewStack),
    Features(Vec<Vec<f64>>),
}

impl ViewInput {
    pub fn as_views(&self) -> Views<'_> {
        match self {
            ViewInput::Images(s) => Views::Images(s),
            ViewInput::Features(f) => Views::Features(f),
        }
    }
}

impl<'a> From<&'a ViewInput> for Views<'a> {
    fn from(v: &'a ViewInput) -> Self {
        v.as_views()
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub views: ViewInput,
    pub metadata: ObjectMetadata,
    pub label: AnnotationRecord,
}

/// Shuffles `0..n` with `seed` and returns (train, validation) indices.
/// A nonzero fraction always leaves at least one sample on each side when
/// `n >= 2`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    idx.shuffle(&mut rng);
    let mut n_val = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else if n < 2 {
        n_val = 0;
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

const SPLIT_SALT: u64 = 0x5eed_5a17;

enum Optimizer {
    Sgd { momentum: f64, velocity: Vec<f64> },
    Adam { beta1: f64, beta2: f64, eps: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd { momentum } => Optimizer::Sgd { momentum, velocity: vec![0.0; n] },
            OptimizerKind::Adam { beta1, beta2, eps } => {
                Optimizer::Adam { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
            }
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *v = *momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Loss and gradient of one sample.
pub fn sample_loss_grad(
    net: &Network,
    params: &[f64],
    norm: &MetaNormalizer,
    sample: &Sample,
    weights: &HeadWeights,
) -> Result<(f64, Vec<f64>), AnnotatorError> {
    let target = Target::from_record(&sample.label)?;
    let (out, trace) = net.forward(params, sample.views.as_views(), &norm.apply(&sample.metadata))?;
    let (loss, ds, dt) = loss_and_grad(&out.score_logits, &out.tag_logits, &target, weights);
    let frozen = net.config.backbone.frozen;
    Ok((loss, net.backward(params, &trace, &ds, &dt, frozen)))
}

struct EvalPass {
    loss: f64,
    metrics: BTreeMap<String, f64>,
}

fn evaluate_split(
    net: &Network,
    params: &[f64],
    norm: &MetaNormalizer,
    samples: &[&Sample],
    weights: &HeadWeights,
) -> Result<EvalPass, AnnotatorError> {
    let outs: Vec<_> = samples
        .par_iter()
        .map(|s| -> Result<_, AnnotatorError> {
            let target = Target::from_record(&s.label)?;
            let (out, _) = net.forward(params, s.views.as_views(), &norm.apply(&s.metadata))?;
            let loss = loss_and_grad(&out.score_logits, &out.tag_logits, &target, weights).0;
            Ok((loss, out, target))
        })
        .collect::<Result<_, _>>()?;
    let n = outs.len() as f64;
    let loss = outs.iter().map(|o| o.0).sum::<f64>() / n;
    let mut strict = 0usize;
    let mut relaxed = 0usize;
    for (_, out, target) in &outs {
        let p = QualityScore::from_code(argmax(&out.score_logits) as u8).unwrap();
        let l = QualityScore::from_code(target.score as u8).unwrap();
        strict += usize::from(p == l);
        relaxed += usize::from(relaxed_match(p, l));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("score_accuracy".to_string(), strict as f64 / n);
    metrics.insert("relaxed_score_accuracy".to_string(), relaxed as f64 / n);
    for (k, tag) in Tag::HEAD_ORDER.iter().enumerate() {
        let scores: Vec<f64> = outs.iter().map(|o| sigmoid(o.1.tag_logits[k])).collect();
        let truth: Vec<bool> = outs.iter().map(|o| o.2.tags[k]).collect();
        let c = Confusion::at_threshold(&scores, &truth, 0.5);
        metrics.insert(format!("{}_f1", tag.name()), c.f1());
    }
    Ok(EvalPass { loss, metrics })
}

/// Trains from scratch. Returns the parameters of the epoch with the lowest
/// validation loss (training loss when the validation split is empty),
/// together with the full history. `epochs == 0` returns the initialised
/// model untouched.
pub fn train(dataset: &[Sample], config: &AnnotatorConfig) -> Result<TrainedAnnotator, AnnotatorError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(AnnotatorError::EmptyDataset);
    }
    for s in dataset {
        Target::from_record(&s.label)?;
    }
    let mut model = TrainedAnnotator::init(config)?;
    let (train_idx, val_idx) = split_indices(dataset.len(), config.validation_fraction, config.seed);
    model.normalizer = MetaNormalizer::fit(train_idx.iter().map(|&i| &dataset[i].metadata));
    if config.epochs == 0 {
        return Ok(model);
    }
    let weights = config.head_weights();
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&Sample> = if val_idx.is_empty() {
        train_set.clone()
    } else {
        val_idx.iter().map(|&i| &dataset[i]).collect()
    };
    let net = model.net.clone();
    let norm = model.normalizer;
    let mut params = std::mem::take(&mut model.params);
    let mut opt = Optimizer::new(config.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| sample_loss_grad(&net, &params, &norm, train_set[i], &weights))
                .collect::<Result<_, _>>()?;
            let mut grad = vec![0.0; params.len()];
            for (loss, g) in &results {
                total += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if let Some(clip) = config.grad_clip {
                let norm2 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm2 > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / norm2);
                }
            }
            if !total.is_finite() {
                return Err(AnnotatorError::Diverged { epoch, loss: total });
            }
            opt.step(&mut params, &grad, config.learning_rate);
        }
        let train_loss = total / train_set.len() as f64;
        let eval = evaluate_split(&net, &params, &norm, &val_set, &weights)?;
        if !eval.loss.is_finite() {
            return Err(AnnotatorError::Diverged { epoch, loss: eval.loss });
        }
        log::info!("epoch {epoch}: train_loss {train_loss:.5} val_loss {:.5}", eval.loss);
        model.history.push(EpochRecord { epoch, train_loss, val_loss: eval.loss, val_metrics: eval.metrics });
        if best.as_ref().is_none_or(|(b, _)| eval.loss < *b) {
            best = Some((eval.loss, params.clone()));
        }
    }
    model.params = best.map(|b| b.1).unwrap_or(params);
    Ok(model)
}
