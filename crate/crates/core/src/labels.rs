//! Label schema: quality score, binary tags, annotation records and the
//! rubric decision tree used by human annotators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Four-level ordinal quality rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QualityScore {
    Low = 0,
    Medium = 1,
    High = 2,
    Superior = 3,
}

impl QualityScore {
    pub const ALL: [QualityScore; 4] = [
        QualityScore::Low,
        QualityScore::Medium,
        QualityScore::High,
        QualityScore::Superior,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            QualityScore::Low => "low",
            QualityScore::Medium => "medium",
            QualityScore::High => "high",
            QualityScore::Superior => "superior",
        }
    }
}

impl fmt::Display for QualityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown quality score `{0}` (expected low|medium|high|superior or 0-3)")]
pub struct ParseScoreError(pub String);

impl FromStr for QualityScore {
    type Err = ParseScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        if let Ok(code) = t.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| ParseScoreError(s.to_string()));
        }
        Self::ALL
            .into_iter()
            .find(|q| q.name() == t)
            .ok_or_else(|| ParseScoreError(s.to_string()))
    }
}

// Manifests carry the integer code; config files may use either form.
impl Serialize for QualityScore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for QualityScore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Code(i64),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Code(c) => u8::try_from(c)
                .ok()
                .and_then(QualityScore::from_code)
                .ok_or_else(|| serde::de::Error::custom(format!("score code {c} out of range 0-3"))),
            Repr::Name(n) => n.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Identifies one of the five binary tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    IsTransparent,
    IsScene,
    IsSingleColor,
    IsMultiObject,
    IsFigure,
}

impl Tag {
    /// Schema order, as written in manifests.
    pub const ALL: [Tag; 5] = [
        Tag::IsTransparent,
        Tag::IsScene,
        Tag::IsSingleColor,
        Tag::IsMultiObject,
        Tag::IsFigure,
    ];

    /// Order of the network's tag logits and of report tables.
    pub const HEAD_ORDER: [Tag; 5] = [
        Tag::IsMultiObject,
        Tag::IsScene,
        Tag::IsFigure,
        Tag::IsTransparent,
        Tag::IsSingleColor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::IsTransparent => "is_transparent",
            Tag::IsScene => "is_scene",
            Tag::IsSingleColor => "is_single_color",
            Tag::IsMultiObject => "is_multi_object",
            Tag::IsFigure => "is_figure",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown tag `{s}`"))
    }
}

/// The five binary traits. All flags are always present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryTagSet {
    pub is_transparent: bool,
    pub is_scene: bool,
    pub is_single_color: bool,
    pub is_multi_object: bool,
    pub is_figure: bool,
}

impl BinaryTagSet {
    pub fn get(&self, tag: Tag) -> bool {
        match tag {
            Tag::IsTransparent => self.is_transparent,
            Tag::IsScene => self.is_scene,
            Tag::IsSingleColor => self.is_single_color,
            Tag::IsMultiObject => self.is_multi_object,
            Tag::IsFigure => self.is_figure,
        }
    }

    pub fn set(&mut self, tag: Tag, value: bool) {
        match tag {
            Tag::IsTransparent => self.is_transparent = value,
            Tag::IsScene => self.is_scene = value,
            Tag::IsSingleColor => self.is_single_color = value,
            Tag::IsMultiObject => self.is_multi_object = value,
            Tag::IsFigure => self.is_figure = value,
        }
    }

    /// Builds a set from a 5-bit mask in [`Tag::ALL`] order.
    pub fn from_bits(bits: u8) -> Self {
        let mut set = Self::default();
        for (i, tag) in Tag::ALL.into_iter().enumerate() {
            set.set(tag, bits & (1 << i) != 0);
        }
        set
    }

    pub fn bits(&self) -> u8 {
        Tag::ALL
            .into_iter()
            .enumerate()
            .filter(|(_, t)| self.get(*t))
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Model,
}

/// Name of the score head in confidence maps.
pub const SCORE_HEAD: &str = "score";

/// All six head names: the score head followed by the tag heads.
pub fn head_names() -> impl Iterator<Item = &'static str> {
    std::iter::once(SCORE_HEAD).chain(Tag::HEAD_ORDER.into_iter().map(Tag::name))
}

/// One object's quality annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub object_id: String,
    pub score: QualityScore,
    pub tags: BinaryTagSet,
    pub source: Source,
    pub annotator_id: Option<String>,
    pub confidences: Option<BTreeMap<String, f64>>,
    pub created_at: DateTime<Utc>,
    pub batch_id: Option<String>,
    /// Fields not in the schema, kept in their original order.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl AnnotationRecord {
    pub fn human(
        object_id: impl Into<String>,
        score: QualityScore,
        tags: BinaryTagSet,
        created_at: DateTime<Utc>,
    ) -> Self {
        Self {
            object_id: object_id.into(),
            score,
            tags,
            source: Source::Human,
            annotator_id: None,
            confidences: None,
            created_at,
            batch_id: None,
            extra: serde_json::Map::new(),
        }
    }
}

/// Per-object mesh statistics fed to the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectMetadata {
    pub vertex_count: u64,
    pub edge_count: u64,
    pub view_count: u64,
    pub like_count: u64,
}

impl ObjectMetadata {
    pub fn as_array(&self) -> [u64; 4] {
        [self.vertex_count, self.edge_count, self.view_count, self.like_count]
    }
}

/// Answers to the three rubric questions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RubricAnswers {
    /// Does the object carry recognizable semantic meaning?
    pub identifiable: bool,
    /// Does it have basic material texture?
    pub textured: bool,
    /// Is the texturing professional and aesthetically coherent?
    /// Only consulted when the first two are both true.
    pub professional: bool,
}

/// Walks the annotator decision tree.
pub fn score_from_decision_tree(answers: RubricAnswers) -> QualityScore {
    match (answers.identifiable, answers.textured, answers.professional) {
        (false, _, _) => QualityScore::Low,
        (true, false, _) => QualityScore::Medium,
        (true, true, true) => QualityScore::Superior,
        (true, true, false) => QualityScore::High,
    }
}

/// A broken record invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyObjectId,
    MissingConfidences,
    UnexpectedConfidences,
    MissingHeadConfidence(String),
    UnknownHead(String),
    ConfidenceOutOfRange { head: String, value: f64 },
}

impl Violation {
    pub fn field(&self) -> &str {
        match self {
            Violation::EmptyObjectId => "object_id",
            Violation::MissingConfidences | Violation::UnexpectedConfidences => "confidences",
            Violation::MissingHeadConfidence(h)
            | Violation::UnknownHead(h)
            | Violation::ConfidenceOutOfRange { head: h, .. } => h,
        }
    }

    pub fn rule(&self) -> &'static str {
        match self {
            Violation::EmptyObjectId => "empty-object-id",
            Violation::MissingConfidences => "missing-confidences",
            Violation::UnexpectedConfidences => "unexpected-confidences",
            Violation::MissingHeadConfidence(_) => "missing-head-confidence",
            Violation::UnknownHead(_) => "unknown-head",
            Violation::ConfidenceOutOfRange { .. } => "confidence-out-of-range",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ConfidenceOutOfRange { head, value } => {
                write!(f, "{}: confidence-out-of-range ({value})", head)
            }
            v => write!(f, "{}: {}", v.field(), v.rule()),
        }
    }
}

/// Checks every record invariant; never fails, returns the list of breaches.
pub fn validate_record(record: &AnnotationRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.object_id.is_empty() {
        out.push(Violation::EmptyObjectId);
    }
    match (&record.source, &record.confidences) {
        (Source::Model, None) => out.push(Violation::MissingConfidences),
        (Source::Human, Some(_)) => out.push(Violation::UnexpectedConfidences),
        (Source::Model, Some(conf)) => {
            for head in head_names() {
                if !conf.contains_key(head) {
                    out.push(Violation::MissingHeadConfidence(head.to_string()));
                }
            }
        }
        (Source::Human, None) => {}
    }
    if let Some(conf) = &record.confidences {
        for (head, &value) in conf {
            if !head_names().any(|h| h == head) {
                out.push(Violation::UnknownHead(head.clone()));
            }
            if !(0.0..=1.0).contains(&value) {
                out.push(Violation::ConfidenceOutOfRange { head: head.clone(), value });
            }
        }
    }
    out
}
