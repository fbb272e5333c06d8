//! Declarative manifest filtering and tag/score distribution statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::labels::{AnnotationRecord, QualityScore, Source, Tag, SCORE_HEAD};
use crate::manifest::{read_manifest, ManifestError};

/// Conjunctive filter over score, tags, source and model confidence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_score: Option<QualityScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_score: Option<QualityScore>,
    #[serde(default)]
    pub require_tags: BTreeMap<Tag, bool>,
    /// Empty means every source is allowed.
    #[serde(default)]
    pub source_allow: Vec<Source>,
    /// Confidence floor for MODEL records: the score head's confidence and
    /// each tag head's decision confidence `max(p, 1 - p)` must reach it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_confidence: Option<f64>,
}

impl FilterSpec {
    /// High-or-superior quality, excluding single-color models, scenes and
    /// models with transparent parts.
    pub fn training_set_b() -> Self {
        FilterSpec {
            min_score: Some(QualityScore::High),
            require_tags: BTreeMap::from([
                (Tag::IsSingleColor, false),
                (Tag::IsScene, false),
                (Tag::IsTransparent, false),
            ]),
            ..Default::default()
        }
    }

    /// Same tag exclusions, superior quality only.
    pub fn superior_only() -> Self {
        FilterSpec { min_score: Some(QualityScore::Superior), ..Self::training_set_b() }
    }

    pub fn from_toml(text: &str) -> Result<Self, CurationError> {
        toml::from_str(text).map_err(|e| CurationError::SpecSyntax(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("filter spec serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("cannot parse filter spec: {0}")]
    SpecSyntax(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A compiled, pure record predicate.
#[derive(Debug, Clone)]
pub struct RecordFilter {
    spec: FilterSpec,
}

pub fn compile_filter(spec: &FilterSpec) -> Result<RecordFilter, CurationError> {
    if let (Some(lo), Some(hi)) = (spec.min_score, spec.max_score) {
        if lo > hi {
            return Err(CurationError::InvalidSpec(format!("min_score {lo} exceeds max_score {hi}")));
        }
    }
    if let Some(c) = spec.min_confidence {
        if !(0.0..=1.0).contains(&c) {
            return Err(CurationError::InvalidSpec(format!("min_confidence {c} outside [0,1]")));
        }
    }
    Ok(RecordFilter { spec: spec.clone() })
}

impl RecordFilter {
    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    pub fn accepts(&self, r: &AnnotationRecord) -> bool {
        let s = &self.spec;
        if s.min_score.is_some_and(|m| r.score < m) || s.max_score.is_some_and(|m| r.score > m) {
            return false;
        }
        if s.require_tags.iter().any(|(&tag, &want)| r.tags.get(tag) != want) {
            return false;
        }
        if !s.source_allow.is_empty() && !s.source_allow.contains(&r.source) {
            return false;
        }
        if let (Some(floor), Source::Model) = (s.min_confidence, r.source) {
            let Some(conf) = &r.confidences else { return false };
            let score_ok = conf.get(SCORE_HEAD).is_some_and(|&p| p >= floor);
            let tags_ok = Tag::ALL
                .into_iter()
                .all(|t| conf.get(t.name()).is_some_and(|&p| p.max(1.0 - p) >= floor));
            if !(score_ok && tags_ok) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterSummary {
    pub n_in: usize,
    pub n_out: usize,
    /// (line number, message) for every skipped malformed line.
    pub errors: Vec<(usize, String)>,
}

/// Streams a manifest through the filter, copying passing lines verbatim.
/// Malformed lines are reported and skipped unless `strict`, which aborts on
/// the first one.
pub fn apply_filter<R: BufRead, W: Write>(
    reader: R,
    mut out: W,
    filter: &RecordFilter,
    strict: bool,
) -> Result<FilterSummary, CurationError> {
    let mut summary = FilterSummary::default();
    for item in read_manifest(reader) {
        match item {
            Ok(line) => {
                summary.n_in += 1;
                if filter.accepts(&line.record) {
                    summary.n_out += 1;
                    writeln!(out, "{}", line.raw)?;
                }
            }
            Err(ManifestError::Io(e)) => return Err(e.into()),
            Err(e) if strict => return Err(e.into()),
            Err(e) => summary.errors.push((e.line().unwrap_or(0), e.to_string())),
        }
    }
    Ok(summary)
}

/// In-memory, order-preserving filter.
pub fn filter_records<'a>(
    records: impl IntoIterator<Item = &'a AnnotationRecord>,
    filter: &'a RecordFilter,
) -> impl Iterator<Item = &'a AnnotationRecord> {
    records.into_iter().filter(move |r| filter.accepts(r))
}

/// Raw tallies; merging two is exact, so shards can be counted separately.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistributionCounts {
    pub n: usize,
    pub tag_yes: BTreeMap<Tag, usize>,
    pub score: BTreeMap<QualityScore, usize>,
}

impl DistributionCounts {
    pub fn add(&mut self, r: &AnnotationRecord) {
        self.n += 1;
        for t in Tag::ALL {
            *self.tag_yes.entry(t).or_default() += r.tags.get(t) as usize;
        }
        *self.score.entry(r.score).or_default() += 1;
    }

    pub fn merge(&mut self, other: &DistributionCounts) {
        self.n += other.n;
        for (k, v) in &other.tag_yes {
            *self.tag_yes.entry(*k).or_default() += v;
        }
        for (k, v) in &other.score {
            *self.score.entry(*k).or_default() += v;
        }
    }

    pub fn table(&self) -> Result<DistributionTable, CurationError> {
        if self.n == 0 {
            return Err(CurationError::EmptyManifest);
        }
        let n = self.n as f64;
        let per_tag = Tag::ALL
            .into_iter()
            .map(|t| {
                let yes = self.tag_yes.get(&t).copied().unwrap_or(0);
                let no = self.n - yes;
                (t, TagFractions { fraction_no: no as f64 / n, fraction_yes: yes as f64 / n })
            })
            .collect();
        let per_score = QualityScore::ALL
            .into_iter()
            .map(|q| (q, self.score.get(&q).copied().unwrap_or(0) as f64 / n))
            .collect();
        Ok(DistributionTable { per_tag, per_score, n: self.n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TagFractions {
    pub fraction_no: f64,
    pub fraction_yes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionTable {
    pub per_tag: BTreeMap<Tag, TagFractions>,
    pub per_score: BTreeMap<QualityScore, f64>,
    pub n: usize,
}

pub fn tag_distribution<'a>(
    records: impl IntoIterator<Item = &'a AnnotationRecord>,
) -> Result<DistributionTable, CurationError> {
    let mut counts = DistributionCounts::default();
    for r in records {
        counts.add(r);
    }
    counts.table()
}

/// Distribution over a manifest stream; fails on the first malformed line.
pub fn tag_distribution_stream<R: BufRead>(reader: R) -> Result<DistributionTable, CurationError> {
    let mut counts = DistributionCounts::default();
    for item in read_manifest(reader) {
        counts.add(&item?.record);
    }
    counts.table()
}

impl DistributionTable {
    /// Two-row percentage table ("0 (No)" / "1 (Yes)") over the five tags.
    pub fn tag_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "Label");
        for t in Tag::HEAD_ORDER {
            let _ = write!(out, " | {:>15}", t.name());
        }
        out.push('\n');
        for (label, yes) in [("0 (No)", false), ("1 (Yes)", true)] {
            let _ = write!(out, "{label:<8}");
            for t in Tag::HEAD_ORDER {
                let f = &self.per_tag[&t];
                let v = if yes { f.fraction_yes } else { f.fraction_no };
                let _ = write!(out, " | {:>15}", format!("{:.2}%", v * 100.0));
            }
            out.push('\n');
        }
        out
    }

    pub fn score_table(&self) -> String {
        let mut out = String::new();
        for (q, f) in &self.per_score {
            let _ = writeln!(out, "{:<8} {:>7.2}%", q.name(), f * 100.0);
        }
        let _ = writeln!(out, "n = {}", self.n);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{head_names, BinaryTagSet};
    use chrono::TimeZone;

    fn rec(id: &str, score: QualityScore, f: impl FnOnce(&mut BinaryTagSet)) -> AnnotationRecord {
        let mut tags = BinaryTagSet::default();
        f(&mut tags);
        AnnotationRecord::human(id, score, tags, chrono::Utc.timestamp_opt(0, 0).unwrap())
    }

    #[test]
    fn training_set_b_excludes_scenes() {
        let f = compile_filter(&FilterSpec::training_set_b()).unwrap();
        assert!(!f.accepts(&rec("a", QualityScore::High, |t| t.is_scene = true)));
        assert!(f.accepts(&rec("a", QualityScore::High, |_| {})));
        assert!(!f.accepts(&rec("a", QualityScore::Medium, |_| {})));
        // figures and multi-object models are not excluded
        assert!(f.accepts(&rec("a", QualityScore::Superior, |t| t.is_figure = true)));
    }

    #[test]
    fn superior_only() {
        let f = compile_filter(&FilterSpec::superior_only()).unwrap();
        assert!(f.accepts(&rec("a", QualityScore::Superior, |_| {})));
        assert!(!f.accepts(&rec("a", QualityScore::High, |_| {})));
    }

    #[test]
    fn empty_spec_accepts_all() {
        let f = compile_filter(&FilterSpec::default()).unwrap();
        for bits in 0..32 {
            for q in QualityScore::ALL {
                assert!(f.accepts(&rec("a", q, |t| *t = BinaryTagSet::from_bits(bits))));
            }
        }
    }

    #[test]
    fn inverted_bounds_rejected() {
        let spec = FilterSpec {
            min_score: Some(QualityScore::Superior),
            max_score: Some(QualityScore::Low),
            ..Default::default()
        };
        assert!(matches!(compile_filter(&spec), Err(CurationError::InvalidSpec(_))));
    }

    #[test]
    fn toml_spec_roundtrip() {
        let text = r#"
min_score = "high"
[require_tags]
is_single_color = false
is_scene = false
is_transparent = false
"#;
        let spec = FilterSpec::from_toml(text).unwrap();
        assert_eq!(spec, FilterSpec::training_set_b());
        assert_eq!(FilterSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(FilterSpec::from_toml("min_score = 2\nbogus = 1").is_err());
        assert_eq!(FilterSpec::from_toml("min_score = 2").unwrap().min_score, Some(QualityScore::High));
    }

    #[test]
    fn confidence_floor_applies_to_model_only() {
        let spec = FilterSpec { min_confidence: Some(0.8), ..Default::default() };
        let f = compile_filter(&spec).unwrap();
        let human = rec("h", QualityScore::Low, |_| {});
        assert!(f.accepts(&human));
        let mut model = human.clone();
        model.source = Source::Model;
        model.confidences = Some(head_names().map(|h| (h.to_string(), 0.95)).collect());
        assert!(f.accepts(&model));
        // a confidently negative tag passes too
        model.confidences.as_mut().unwrap().insert("is_scene".into(), 0.05);
        assert!(f.accepts(&model));
        model.confidences.as_mut().unwrap().insert("is_scene".into(), 0.4);
        assert!(!f.accepts(&model));
    }

    #[test]
    fn stream_filter_reports_bad_lines() {
        let good = crate::manifest::to_line(&rec("a", QualityScore::High, |_| {})).unwrap();
        let text = format!("{good}\nnot json\n{good}\n");
        let f = compile_filter(&FilterSpec::training_set_b()).unwrap();
        let mut out = Vec::new();
        let s = apply_filter(text.as_bytes(), &mut out, &f, false).unwrap();
        assert_eq!((s.n_in, s.n_out), (2, 2));
        assert_eq!(s.errors.len(), 1);
        assert_eq!(s.errors[0].0, 2);
        assert_eq!(String::from_utf8(out).unwrap(), format!("{good}\n{good}\n"));
        assert!(apply_filter(text.as_bytes(), Vec::new(), &f, true).is_err());
    }

    #[test]
    fn empty_manifest() {
        let f = compile_filter(&FilterSpec::default()).unwrap();
        let s = apply_filter(&b""[..], Vec::new(), &f, false).unwrap();
        assert_eq!((s.n_in, s.n_out), (0, 0));
        assert!(matches!(tag_distribution(std::iter::empty()), Err(CurationError::EmptyManifest)));
    }

    #[test]
    fn single_record_distribution() {
        let r = rec("a", QualityScore::Medium, |t| t.is_figure = true);
        let d = tag_distribution([&r]).unwrap();
        assert_eq!(d.per_tag[&Tag::IsFigure].fraction_yes, 1.0);
        assert_eq!(d.per_tag[&Tag::IsScene].fraction_no, 1.0);
        assert_eq!(d.per_score[&QualityScore::Medium], 1.0);
        assert!(d.tag_table().contains("100.00%"));
    }
}
