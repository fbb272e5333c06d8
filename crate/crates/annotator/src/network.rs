//! Forward and backward passes of the annotation network over a flat
//! parameter vector.
//!
//! Pipeline per object: backbone on each view, LSTM over the view sequence,
//! attention pooling of the hidden states, a ReLU metadata embedding, and
//! two linear heads (4 score logits, 5 tag logits) on `[context; metadata]`.

use std::ops::Range;

use meshqa_core::render::ViewStack;
use meshqa_core::ObjectMetadata;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AnnotatorConfig, AttentionKind, BackboneKind, SequenceEncoder};
use crate::error::AnnotatorError;

pub const META_FEATURES: usize = 4;
pub const SCORE_CLASSES: usize = 4;
pub const TAG_HEADS: usize = 5;

/// A contiguous block of the parameter vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Slot {
    pub start: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv1_w: Slot,
    pub conv1_b: Slot,
    pub conv2_w: Slot,
    pub conv2_b: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
    pub lstm_wx: Slot,
    pub lstm_wh: Slot,
    pub lstm_b: Slot,
    pub att_w: Slot,
    pub att_b: Slot,
    pub att_v: Slot,
    pub att_q: Slot,
    pub meta_w: Slot,
    pub meta_b: Slot,
    pub score_w: Slot,
    pub score_b: Slot,
    pub tag_w: Slot,
    pub tag_b: Slot,
    pub total: usize,
}

/// Sizes derived from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub in_h: usize,
    pub in_w: usize,
    pub c1: usize,
    pub c2: usize,
    pub h1: usize,
    pub w1: usize,
    pub h2: usize,
    pub w2: usize,
    pub feature: usize,
    pub hidden: usize,
    pub attention: usize,
    pub metadata: usize,
    pub views: usize,
}

fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl Dims {
    pub fn of(cfg: &AnnotatorConfig) -> Self {
        let (in_h, in_w) = cfg.backbone.input_resolution;
        let (c1, c2) = cfg.backbone.channels;
        let (h1, w1) = (conv_out(in_h.max(1)), conv_out(in_w.max(1)));
        Dims {
            in_h,
            in_w,
            c1,
            c2,
            h1,
            w1,
            h2: conv_out(h1),
            w2: conv_out(w1),
            feature: cfg.backbone.feature_dim,
            hidden: cfg.rnn_hidden,
            attention: cfg.attention_dim,
            metadata: cfg.metadata_dim,
            views: cfg.n_views,
        }
    }

    pub fn joint(&self) -> usize {
        self.hidden + self.metadata
    }
}

impl Layout {
    pub fn new(cfg: &AnnotatorConfig) -> Self {
        let d = Dims::of(cfg);
        let mut off = 0;
        let mut next = |len: usize| {
            let s = Slot { start: off, len };
            off += len;
            s
        };
        let tiny = cfg.backbone.kind == BackboneKind::TinyScratch;
        let lstm = cfg.sequence_encoder == SequenceEncoder::Lstm;
        let additive = cfg.attention == AttentionKind::Additive;
        let on = |flag: bool, n: usize| if flag { n } else { 0 };
        let conv1_w = next(on(tiny, d.c1 * 3 * 9));
        let conv1_b = next(on(tiny, d.c1));
        let conv2_w = next(on(tiny, d.c2 * d.c1 * 9));
        let conv2_b = next(on(tiny, d.c2));
        let proj_w = next(on(tiny, d.feature * 2 * d.c2));
        let proj_b = next(on(tiny, d.feature));
        let lstm_wx = next(on(lstm, 4 * d.hidden * d.feature));
        let lstm_wh = next(on(lstm, 4 * d.hidden * d.hidden));
        let lstm_b = next(on(lstm, 4 * d.hidden));
        let att_w = next(on(additive, d.attention * d.hidden));
        let att_b = next(on(additive, d.attention));
        let att_v = next(on(additive, d.attention));
        let att_q = next(on(!additive, d.hidden));
        let meta_w = next(d.metadata * META_FEATURES);
        let meta_b = next(d.metadata);
        let score_w = next(SCORE_CLASSES * d.joint());
        let score_b = next(SCORE_CLASSES);
        let tag_w = next(TAG_HEADS * d.joint());
        let tag_b = next(TAG_HEADS);
        Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            proj_w,
            proj_b,
            lstm_wx,
            lstm_wh,
            lstm_b,
            att_w,
            att_b,
            att_v,
            att_q,
            meta_w,
            meta_b,
            score_w,
            score_b,
            tag_w,
            tag_b,
            total: off,
        }
    }

    /// Parameters belonging to the image backbone.
    pub fn backbone(&self) -> Range<usize> {
        self.conv1_w.start..self.proj_b.start + self.proj_b.len
    }
}

/// log1p then z-score, with statistics taken from a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaNormalizer {
    pub mean: [f64; META_FEATURES],
    pub std: [f64; META_FEATURES],
}

impl Default for MetaNormalizer {
    fn default() -> Self {
        Self { mean: [0.0; META_FEATURES], std: [1.0; META_FEATURES] }
    }
}

impl MetaNormalizer {
    pub fn fit<'a>(items: impl IntoIterator<Item = &'a ObjectMetadata>) -> Self {
        let rows: Vec<[f64; META_FEATURES]> = items.into_iter().map(log_counts).collect();
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; META_FEATURES];
        for r in &rows {
            for k in 0..META_FEATURES {
                mean[k] += r[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; META_FEATURES];
        for r in &rows {
            for k in 0..META_FEATURES {
                std[k] += (r[k] - mean[k]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            // constant column: leave centred values unscaled
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, meta: &ObjectMetadata) -> [f64; META_FEATURES] {
        let x = log_counts(meta);
        std::array::from_fn(|k| (x[k] - self.mean[k]) / self.std[k])
    }
}

fn log_counts(meta: &ObjectMetadata) -> [f64; META_FEATURES] {
    meta.as_array().map(|c| (c as f64).ln_1p())
}

/// View input borrowed for one forward pass: rendered images for the tiny
/// backbone, or precomputed per-view features for the pretrained one.
#[derive(Debug, Clone, Copy)]
pub enum Views<'a> {
    Images(&'a ViewStack),
    Features(&'a [Vec<f64>]),
}

impl<'a> From<&'a ViewStack> for Views<'a> {
    fn from(s: &'a ViewStack) -> Self {
        Views::Images(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadOutputs {
    pub score_logits: [f64; SCORE_CLASSES],
    /// In [`meshqa_core::Tag::HEAD_ORDER`].
    pub tag_logits: [f64; TAG_HEADS],
    pub attention_weights: Vec<f64>,
}

struct ViewTrace {
    x0: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    /// Per-channel mean then per-channel max of `a2`.
    pooled: Vec<f64>,
    /// Position of each channel's max (first occurrence).
    max_at: Vec<usize>,
}

/// Intermediate values of a forward pass, kept for backpropagation.
pub struct Trace {
    views: Vec<ViewTrace>,
    xs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    /// Activated gates i, f, g, o per step.
    gates: Vec<Vec<f64>>,
    att_u: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    z_meta: [f64; META_FEATURES],
    m_pre: Vec<f64>,
    joint: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: AnnotatorConfig,
    pub layout: Layout,
    pub dims: Dims,
}

impl Network {
    pub fn new(config: &AnnotatorConfig) -> Result<Self, AnnotatorError> {
        config.validate()?;
        Ok(Self { config: config.clone(), layout: Layout::new(config), dims: Dims::of(config) })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// He-uniform convolutions, Glorot-uniform dense weights, zero biases
    /// except a forget-gate bias of 1.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let l = &self.layout;
        let d = &self.dims;
        let mut p = vec![0.0; l.total];
        let mut fill = |slot: Slot, limit: f64| {
            for v in &mut p[slot.range()] {
                *v = rng.gen_range(-limit..=limit);
            }
        };
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        fill(l.conv1_w, he(27));
        fill(l.conv2_w, he(d.c1 * 9));
        fill(l.proj_w, glorot(2 * d.c2, d.feature));
        fill(l.lstm_wx, glorot(d.feature, 4 * d.hidden));
        fill(l.lstm_wh, glorot(d.hidden, 4 * d.hidden));
        fill(l.att_w, glorot(d.hidden, d.attention));
        fill(l.att_v, glorot(d.attention, 1));
        fill(l.att_q, glorot(d.hidden, 1));
        fill(l.meta_w, glorot(META_FEATURES, d.metadata));
        fill(l.score_w, glorot(d.joint(), SCORE_CLASSES));
        fill(l.tag_w, glorot(d.joint(), TAG_HEADS));
        let h = d.hidden;
        for v in p[l.lstm_b.range()].iter_mut().skip(h).take(h) {
            *v = 1.0;
        }
        p
    }

    fn features(&self, params: &[f64], views: Views<'_>) -> Result<(Vec<ViewTrace>, Vec<Vec<f64>>), AnnotatorError> {
        let d = &self.dims;
        let kind = self.config.backbone.kind;
        match (views, kind) {
            (Views::Images(stack), BackboneKind::TinyScratch) => {
                if stack.images.len() != d.views {
                    return Err(AnnotatorError::ShapeMismatch(format!(
                        "expected {} views, got {}",
                        d.views,
                        stack.images.len()
                    )));
                }
                let mut traces = Vec::with_capacity(d.views);
                let mut feats = Vec::with_capacity(d.views);
                for (i, img) in stack.images.iter().enumerate() {
                    if (img.height, img.width) != (d.in_h, d.in_w) || img.data.len() != d.in_h * d.in_w * 3 {
                        return Err(AnnotatorError::ShapeMismatch(format!(
                            "view {i} is {}x{}, backbone expects {}x{}",
                            img.height, img.width, d.in_h, d.in_w
                        )));
                    }
                    let (t, f) = self.backbone_forward(params, &img.data);
                    traces.push(t);
                    feats.push(f);
                }
                Ok((traces, feats))
            }
            (Views::Features(fs), BackboneKind::PretrainedDeep) => {
                if fs.len() != d.views {
                    return Err(AnnotatorError::ShapeMismatch(format!("expected {} views, got {}", d.views, fs.len())));
                }
                if let Some((i, f)) = fs.iter().enumerate().find(|(_, f)| f.len() != d.feature) {
                    return Err(AnnotatorError::ShapeMismatch(format!(
                        "view {i} has {} features, expected {}",
                        f.len(),
                        d.feature
                    )));
                }
                Ok((Vec::new(), fs.to_vec()))
            }
            (Views::Images(_), BackboneKind::PretrainedDeep) => Err(AnnotatorError::ShapeMismatch(
                "pretrained backbone takes precomputed view features, not images".into(),
            )),
            (Views::Features(_), BackboneKind::TinyScratch) => {
                Err(AnnotatorError::ShapeMismatch("tiny backbone takes rendered images, not features".into()))
            }
        }
    }

    fn backbone_forward(&self, p: &[f64], hwc: &[f32]) -> (ViewTrace, Vec<f64>) {
        let d = &self.dims;
        let l = &self.layout;
        let plane = d.in_h * d.in_w;
        let mut x0 = vec![0.0; 3 * plane];
        for (px, rgb) in hwc.chunks_exact(3).enumerate() {
            for c in 0..3 {
                x0[c * plane + px] = rgb[c] as f64 - 0.5;
            }
        }
        let mut a1 = conv3x3_s2(&x0, 3, d.in_h, d.in_w, &p[l.conv1_w.range()], &p[l.conv1_b.range()], d.c1);
        relu_inplace(&mut a1);
        let mut a2 = conv3x3_s2(&a1, d.c1, d.h1, d.w1, &p[l.conv2_w.range()], &p[l.conv2_b.range()], d.c2);
        relu_inplace(&mut a2);
        let plane = d.h2 * d.w2;
        let mut pooled = vec![0.0; 2 * d.c2];
        let mut max_at = vec![0; d.c2];
        for (c, ch) in a2.chunks_exact(plane).enumerate() {
            pooled[c] = ch.iter().sum::<f64>() / plane as f64;
            let mut best = 0;
            for (i, v) in ch.iter().enumerate() {
                if *v > ch[best] {
                    best = i;
                }
            }
            pooled[d.c2 + c] = ch[best];
            max_at[c] = best;
        }
        let mut feat = p[l.proj_b.range()].to_vec();
        matvec_acc(&p[l.proj_w.range()], d.feature, 2 * d.c2, &pooled, &mut feat);
        (ViewTrace { x0, a1, a2, pooled, max_at }, feat)
    }

    pub fn forward(
        &self,
        params: &[f64],
        views: Views<'_>,
        meta: &[f64; META_FEATURES],
    ) -> Result<(HeadOutputs, Trace), AnnotatorError> {
        if params.len() != self.layout.total {
            return Err(AnnotatorError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        let (vtraces, xs) = self.features(params, views)?;
        let (hs, cs, gates) = match self.config.sequence_encoder {
            SequenceEncoder::Lstm => self.lstm_forward(params, &xs),
            SequenceEncoder::Identity => (xs.clone(), Vec::new(), Vec::new()),
        };
        let (att_u, alpha) = self.attention_scores(params, &hs);
        let h = self.dims.hidden;
        let mut joint = vec![0.0; self.dims.joint()];
        for (a, ht) in alpha.iter().zip(&hs) {
            for k in 0..h {
                joint[k] += a * ht[k];
            }
        }
        let l = &self.layout;
        let mut m_pre = params[l.meta_b.range()].to_vec();
        matvec_acc(&params[l.meta_w.range()], self.dims.metadata, META_FEATURES, meta, &mut m_pre);
        for (j, m) in joint[h..].iter_mut().zip(&m_pre) {
            *j = m.max(0.0);
        }
        let mut score = [0.0; SCORE_CLASSES];
        score.copy_from_slice(&params[l.score_b.range()]);
        matvec_acc(&params[l.score_w.range()], SCORE_CLASSES, joint.len(), &joint, &mut score);
        let mut tags = [0.0; TAG_HEADS];
        tags.copy_from_slice(&params[l.tag_b.range()]);
        matvec_acc(&params[l.tag_w.range()], TAG_HEADS, joint.len(), &joint, &mut tags);
        let out = HeadOutputs { score_logits: score, tag_logits: tags, attention_weights: alpha.clone() };
        let trace = Trace { views: vtraces, xs, hs, cs, gates, att_u, alpha, z_meta: *meta, m_pre, joint };
        Ok((out, trace))
    }

    #[allow(clippy::type_complexity)]
    fn lstm_forward(&self, p: &[f64], xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let l = &self.layout;
        let (h, f) = (self.dims.hidden, self.dims.feature);
        let (wx, wh, b) = (&p[l.lstm_wx.range()], &p[l.lstm_wh.range()], &p[l.lstm_b.range()]);
        let mut hs = Vec::with_capacity(xs.len());
        let mut cs = Vec::with_capacity(xs.len());
        let mut gates = Vec::with_capacity(xs.len());
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for x in xs {
            let mut z = b.to_vec();
            matvec_acc(wx, 4 * h, f, x, &mut z);
            matvec_acc(wh, 4 * h, h, &h_prev, &mut z);
            for (k, v) in z.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&k) { v.tanh() } else { sigmoid(*v) };
            }
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let (i, fg, g, o) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
                c[k] = fg * c_prev[k] + i * g;
                hn[k] = o * c[k].tanh();
            }
            gates.push(z);
            h_prev.clone_from(&hn);
            c_prev.clone_from(&c);
            hs.push(hn);
            cs.push(c);
        }
        (hs, cs, gates)
    }

    fn attention_scores(&self, p: &[f64], hs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let l = &self.layout;
        let (h, a) = (self.dims.hidden, self.dims.attention);
        let mut us = Vec::new();
        let e: Vec<f64> = match self.config.attention {
            AttentionKind::Additive => {
                let (w, b, v) = (&p[l.att_w.range()], &p[l.att_b.range()], &p[l.att_v.range()]);
                hs.iter()
                    .map(|ht| {
                        let mut u = b.to_vec();
                        matvec_acc(w, a, h, ht, &mut u);
                        u.iter_mut().for_each(|x| *x = x.tanh());
                        let e = dot(v, &u);
                        us.push(u);
                        e
                    })
                    .collect()
            }
            AttentionKind::DotProduct => {
                let q = &p[l.att_q.range()];
                let scale = 1.0 / (h as f64).sqrt();
                hs.iter().map(|ht| dot(q, ht) * scale).collect()
            }
        };
        (us, softmax(&e))
    }

    /// Gradient of `dscore . score_logits + dtag . tag_logits` with respect
    /// to every parameter. Backbone gradients are left at zero when
    /// `skip_backbone` is set.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        dscore: &[f64; SCORE_CLASSES],
        dtag: &[f64; TAG_HEADS],
        skip_backbone: bool,
    ) -> Vec<f64> {
        let l = &self.layout;
        let d = &self.dims;
        let (h, jn) = (d.hidden, d.joint());
        let mut g = vec![0.0; l.total];

        outer_acc(&mut g[l.score_w.range()], dscore, &trace.joint);
        add_into(&mut g[l.score_b.range()], dscore);
        outer_acc(&mut g[l.tag_w.range()], dtag, &trace.joint);
        add_into(&mut g[l.tag_b.range()], dtag);
        let mut djoint = vec![0.0; jn];
        matvec_t_acc(&params[l.score_w.range()], SCORE_CLASSES, jn, dscore, &mut djoint);
        matvec_t_acc(&params[l.tag_w.range()], TAG_HEADS, jn, dtag, &mut djoint);

        let dm_pre: Vec<f64> =
            djoint[h..].iter().zip(&trace.m_pre).map(|(dm, pre)| if *pre > 0.0 { *dm } else { 0.0 }).collect();
        outer_acc(&mut g[l.meta_w.range()], &dm_pre, &trace.z_meta);
        add_into(&mut g[l.meta_b.range()], &dm_pre);

        let dctx = &djoint[..h];
        let n = trace.hs.len();
        let dalpha: Vec<f64> = trace.hs.iter().map(|ht| dot(dctx, ht)).collect();
        let s: f64 = trace.alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
        let de: Vec<f64> = trace.alpha.iter().zip(&dalpha).map(|(a, da)| a * (da - s)).collect();
        let mut dhs: Vec<Vec<f64>> = trace.alpha.iter().map(|a| dctx.iter().map(|x| a * x).collect()).collect();
        match self.config.attention {
            AttentionKind::Additive => {
                let a = d.attention;
                let w = &params[l.att_w.range()];
                let v = &params[l.att_v.range()];
                for t in 0..n {
                    let u = &trace.att_u[t];
                    for k in 0..a {
                        g[l.att_v.start + k] += de[t] * u[k];
                    }
                    let dpre: Vec<f64> = (0..a).map(|k| de[t] * v[k] * (1.0 - u[k] * u[k])).collect();
                    outer_acc(&mut g[l.att_w.range()], &dpre, &trace.hs[t]);
                    add_into(&mut g[l.att_b.range()], &dpre);
                    matvec_t_acc(w, a, h, &dpre, &mut dhs[t]);
                }
            }
            AttentionKind::DotProduct => {
                let q = &params[l.att_q.range()];
                let scale = 1.0 / (h as f64).sqrt();
                for t in 0..n {
                    for k in 0..h {
                        g[l.att_q.start + k] += de[t] * trace.hs[t][k] * scale;
                        dhs[t][k] += de[t] * q[k] * scale;
                    }
                }
            }
        }

        let dxs = match self.config.sequence_encoder {
            SequenceEncoder::Identity => dhs,
            SequenceEncoder::Lstm => self.lstm_backward(params, trace, &dhs, &mut g),
        };

        if !skip_backbone && !trace.views.is_empty() {
            for (vt, dx) in trace.views.iter().zip(&dxs) {
                self.backbone_backward(params, vt, dx, &mut g);
            }
        }
        g
    }

    fn lstm_backward(&self, p: &[f64], tr: &Trace, dhs: &[Vec<f64>], g: &mut [f64]) -> Vec<Vec<f64>> {
        let l = &self.layout;
        let (h, f) = (self.dims.hidden, self.dims.feature);
        let (wx, wh) = (&p[l.lstm_wx.range()], &p[l.lstm_wh.range()]);
        let n = tr.hs.len();
        let zeros = vec![0.0; h];
        let mut dxs = vec![vec![0.0; f]; n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..n).rev() {
            let z = &tr.gates[t];
            let c = &tr.cs[t];
            let c_prev = if t > 0 { &tr.cs[t - 1] } else { &zeros };
            let h_prev = if t > 0 { &tr.hs[t - 1] } else { &zeros };
            for k in 0..h {
                let (i, fg, gg, o) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
                let dh = dhs[t][k] + dh_next[k];
                let tc = c[k].tanh();
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                dz[k] = dc * gg * i * (1.0 - i);
                dz[h + k] = dc * c_prev[k] * fg * (1.0 - fg);
                dz[2 * h + k] = dc * i * (1.0 - gg * gg);
                dz[3 * h + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * fg;
            }
            outer_acc(&mut g[l.lstm_wx.range()], &dz, &tr.xs[t]);
            outer_acc(&mut g[l.lstm_wh.range()], &dz, h_prev);
            add_into(&mut g[l.lstm_b.range()], &dz);
            matvec_t_acc(wx, 4 * h, f, &dz, &mut dxs[t]);
            dh_next.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(wh, 4 * h, h, &dz, &mut dh_next);
        }
        dxs
    }

    fn backbone_backward(&self, p: &[f64], vt: &ViewTrace, dfeat: &[f64], g: &mut [f64]) {
        let l = &self.layout;
        let d = &self.dims;
        outer_acc(&mut g[l.proj_w.range()], dfeat, &vt.pooled);
        add_into(&mut g[l.proj_b.range()], dfeat);
        let mut dpooled = vec![0.0; 2 * d.c2];
        matvec_t_acc(&p[l.proj_w.range()], d.feature, 2 * d.c2, dfeat, &mut dpooled);
        let plane2 = d.h2 * d.w2;
        let inv = 1.0 / plane2 as f64;
        let mut da2 = vec![0.0; d.c2 * plane2];
        for c in 0..d.c2 {
            let base = c * plane2;
            da2[base + vt.max_at[c]] += dpooled[d.c2 + c];
            for i in base..base + plane2 {
                da2[i] = if vt.a2[i] > 0.0 { da2[i] + dpooled[c] * inv } else { 0.0 };
            }
        }
        let mut da1 = vec![0.0; vt.a1.len()];
        let (w2, b2) = (l.conv2_w.range(), l.conv2_b.range());
        {
            let (gw, gb) = split_two(g, w2.clone(), b2);
            conv3x3_s2_backward(&vt.a1, d.c1, d.h1, d.w1, &p[w2], d.c2, &da2, gw, gb, Some(&mut da1));
        }
        for (dv, a) in da1.iter_mut().zip(&vt.a1) {
            if *a <= 0.0 {
                *dv = 0.0;
            }
        }
        let (w1, b1) = (l.conv1_w.range(), l.conv1_b.range());
        let (gw, gb) = split_two(g, w1.clone(), b1);
        conv3x3_s2_backward(&vt.x0, 3, d.in_h, d.in_w, &p[w1], d.c1, &da1, gw, gb, None);
    }
}

/// Disjoint mutable views of two ranges where `a` precedes `b`.
fn split_two(g: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// out += W x, W row-major `rows x cols`.
fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// dx += W^T dy.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        for (d, wv) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *d += g * wv;
        }
    }
}

/// dw += dy x^T.
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, g) in dy.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

/// Output positions `o` for which input index `2o + k - 1` is inside `0..n`.
fn valid_outputs(k: usize, n: usize, n_out: usize) -> Range<usize> {
    let start = usize::from(k == 0);
    let end = match n.checked_sub(k) {
        Some(r) => (r / 2 + 1).min(n_out),
        None => 0,
    };
    start..end.max(start)
}

/// Unfolds 3x3 stride-2 patches (zero padded) into a `(c*9) x (ho*wo)`
/// row-major matrix.
fn im2col(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let n = ho * wo;
    let mut cols = vec![0.0; c * 9 * n];
    for ci in 0..c {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let ys = valid_outputs(ky, h, ho);
            for kx in 0..3 {
                let xs = valid_outputs(kx, w, wo);
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for oy in ys.clone() {
                    let srow = &src[(2 * oy + ky - 1) * w..];
                    for ox in xs.clone() {
                        row[oy * wo + ox] = srow[2 * ox + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adds a column matrix back onto the input positions it was read from.
fn col2im_acc(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let n = ho * wo;
    for ci in 0..c {
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let ys = valid_outputs(ky, h, ho);
            for kx in 0..3 {
                let xs = valid_outputs(kx, w, wo);
                let row = &cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for oy in ys.clone() {
                    let drow = &mut dst[(2 * oy + ky - 1) * w..];
                    for ox in xs.clone() {
                        drow[2 * ox + kx - 1] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 2, zero padding 1, CHW layout.
fn conv3x3_s2(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
    let n = conv_out(h) * conv_out(w);
    let k = c_in * 9;
    let cols = im2col(input, c_in, h, w);
    let mut out = vec![0.0; c_out * n];
    for co in 0..c_out {
        let orow = &mut out[co * n..(co + 1) * n];
        orow.iter_mut().for_each(|v| *v = bias[co]);
        for (kk, wv) in weight[co * k..(co + 1) * k].iter().enumerate() {
            for (o, x) in orow.iter_mut().zip(&cols[kk * n..(kk + 1) * n]) {
                *o += wv * x;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_s2_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    din: Option<&mut [f64]>,
) {
    let n = conv_out(h) * conv_out(w);
    let k = c_in * 9;
    let cols = im2col(input, c_in, h, w);
    let mut dcols = if din.is_some() { vec![0.0; k * n] } else { Vec::new() };
    for co in 0..c_out {
        let g = &dout[co * n..(co + 1) * n];
        db[co] += g.iter().sum::<f64>();
        for kk in 0..k {
            dw[co * k + kk] += dot(g, &cols[kk * n..(kk + 1) * n]);
        }
        if !dcols.is_empty() {
            for kk in 0..k {
                let wv = weight[co * k + kk];
                for (d, gv) in dcols[kk * n..(kk + 1) * n].iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
    }
    if let Some(din) = din {
        col2im_acc(&dcols, c_in, h, w, din);
    }
}
