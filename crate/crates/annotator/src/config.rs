use std::collections::BTreeMap;
use std::path::Path;

use meshqa_core::labels::{Tag, SCORE_HEAD};
use serde::{Deserialize, Serialize};

use crate::error::AnnotatorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Frozen features from an external pretrained image classifier,
    /// supplied per view as precomputed vectors.
    PretrainedDeep,
    /// Two strided 3x3 convolutions, global average pooling and a linear
    /// projection; trained from scratch.
    TinyScratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub feature_dim: usize,
    #[serde(default)]
    pub frozen: bool,
    /// Expected view resolution (height, width).
    #[serde(default = "default_input_resolution")]
    pub input_resolution: (usize, usize),
    /// Output channels of the two convolutions (TINY_SCRATCH only).
    #[serde(default = "default_channels")]
    pub channels: (usize, usize),
}

fn default_input_resolution() -> (usize, usize) {
    (224, 224)
}

fn default_channels() -> (usize, usize) {
    (8, 16)
}

impl BackboneSpec {
    pub fn tiny(feature_dim: usize, resolution: (usize, usize), channels: (usize, usize)) -> Self {
        Self { kind: BackboneKind::TinyScratch, feature_dim, frozen: false, input_resolution: resolution, channels }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceEncoder {
    #[default]
    Lstm,
    /// Hidden states are the view features themselves. Diagnostic mode;
    /// requires `rnn_hidden == feature_dim`.
    Identity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// score_i = v . tanh(W h_i + b)
    #[default]
    Additive,
    /// score_i = q . h_i / sqrt(hidden)
    DotProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub backbone: BackboneSpec,
    #[serde(default = "d_rnn_hidden")]
    pub rnn_hidden: usize,
    #[serde(default = "d_attention_dim")]
    pub attention_dim: usize,
    #[serde(default = "d_metadata_dim")]
    pub metadata_dim: usize,
    #[serde(default = "d_n_views")]
    pub n_views: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Loss weight per head name (`score`, `is_scene`, ...); missing heads
    /// weigh 1.
    #[serde(default)]
    pub head_loss_weights: BTreeMap<String, f64>,
    #[serde(default = "d_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub sequence_encoder: SequenceEncoder,
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Clip the global gradient norm of each step to this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn d_rnn_hidden() -> usize {
    256
}
fn d_attention_dim() -> usize {
    128
}
fn d_metadata_dim() -> usize {
    32
}
fn d_n_views() -> usize {
    40
}
fn d_validation_fraction() -> f64 {
    0.2
}

impl AnnotatorConfig {
    /// Defaults for everything but the backbone and optimisation schedule.
    pub fn new(backbone: BackboneSpec, learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            backbone,
            rnn_hidden: d_rnn_hidden(),
            attention_dim: d_attention_dim(),
            metadata_dim: d_metadata_dim(),
            n_views: d_n_views(),
            learning_rate,
            epochs,
            batch_size,
            seed: 0,
            head_loss_weights: BTreeMap::new(),
            validation_fraction: d_validation_fraction(),
            sequence_encoder: SequenceEncoder::Lstm,
            attention: AttentionKind::Additive,
            optimizer: OptimizerKind::default(),
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<(), AnnotatorError> {
        let bad = |m: String| Err(AnnotatorError::InvalidConfig(m));
        let b = &self.backbone;
        for (name, v) in [
            ("backbone.feature_dim", b.feature_dim),
            ("rnn_hidden", self.rnn_hidden),
            ("attention_dim", self.attention_dim),
            ("metadata_dim", self.metadata_dim),
            ("n_views", self.n_views),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if b.kind == BackboneKind::TinyScratch
            && (b.channels.0 == 0 || b.channels.1 == 0 || b.input_resolution.0 == 0 || b.input_resolution.1 == 0)
        {
            return bad("backbone channels and input_resolution must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0,1), got {}", self.validation_fraction));
        }
        for (head, w) in &self.head_loss_weights {
            if head != SCORE_HEAD && head.parse::<Tag>().is_err() {
                return bad(format!("unknown head `{head}` in head_loss_weights"));
            }
            if !(*w >= 0.0 && w.is_finite()) {
                return bad(format!("loss weight for `{head}` must be >= 0, got {w}"));
            }
        }
        if self.sequence_encoder == SequenceEncoder::Identity && self.rnn_hidden != b.feature_dim {
            return bad("identity sequence encoder requires rnn_hidden == backbone.feature_dim".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn head_weights(&self) -> HeadWeights {
        let w = |name: &str| self.head_loss_weights.get(name).copied().unwrap_or(1.0);
        HeadWeights { score: w(SCORE_HEAD), tags: Tag::HEAD_ORDER.map(|t| w(t.name())) }
    }

    pub fn from_toml(text: &str) -> Result<Self, AnnotatorError> {
        let cfg: Self = toml::from_str(text).map_err(|e| AnnotatorError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self, AnnotatorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnnotatorError::InvalidConfig(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let cfg: Self =
                    serde_json::from_str(&text).map_err(|e| AnnotatorError::InvalidConfig(e.to_string()))?;
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Self::from_toml(&text),
        }
    }
}

/// Loss weights in head order: score, then tags in [`Tag::HEAD_ORDER`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadWeights {
    pub score: f64,
    pub tags: [f64; 5],
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self { score: 1.0, tags: [1.0; 5] }
    }
}

impl HeadWeights {
    pub fn scaled(&self, k: f64) -> Self {
        Self { score: self.score * k, tags: self.tags.map(|t| t * k) }
    }
}
