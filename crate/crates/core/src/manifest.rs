//! Line-delimited manifest codec for [`AnnotationRecord`]s.
//!
//! One JSON object per line with the fields `object_id`, `score`, `tags`,
//! `source`, `annotator_id`, `confidences`, `created_at`, `batch_id`.
//! Unknown fields are carried through untouched.

use std::collections::BTreeMap;
use std::io::BufRead;

use chrono::{DateTime, SecondsFormat, Utc};
use serde_json::{Map, Value};

use crate::labels::{validate_record, AnnotationRecord, BinaryTagSet, QualityScore, Source, Violation};

pub const FIELDS: [&str; 8] = [
    "object_id",
    "score",
    "tags",
    "source",
    "annotator_id",
    "confidences",
    "created_at",
    "batch_id",
];

const REQUIRED: [&str; 5] = ["object_id", "score", "tags", "source", "created_at"];

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("line {line}, column {column}: malformed record: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: field `{field}`: {message}")]
    InvalidField { line: usize, field: String, message: String },
    #[error("record `{object_id}` violates schema: {}", fmt_violations(.violations))]
    Invalid { object_id: String, violations: Vec<Violation> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl ManifestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ManifestError::Syntax { line, .. }
            | ManifestError::MissingField { line, .. }
            | ManifestError::InvalidField { line, .. } => Some(*line),
            _ => None,
        }
    }

    fn at_line(self, n: usize) -> Self {
        match self {
            ManifestError::Syntax { column, message, .. } => ManifestError::Syntax { line: n, column, message },
            ManifestError::MissingField { field, .. } => ManifestError::MissingField { line: n, field },
            ManifestError::InvalidField { field, message, .. } => {
                ManifestError::InvalidField { line: n, field, message }
            }
            other => other,
        }
    }
}

/// A non-fatal observation made while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    UnknownField(String),
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Serializes a record to one manifest line (no trailing newline).
/// Rejects exactly the records [`validate_record`] flags.
pub fn to_line(record: &AnnotationRecord) -> Result<String, ManifestError> {
    let violations = validate_record(record);
    if !violations.is_empty() {
        return Err(ManifestError::Invalid { object_id: record.object_id.clone(), violations });
    }
    let mut obj = Map::new();
    obj.insert("object_id".into(), Value::from(record.object_id.clone()));
    obj.insert("score".into(), Value::from(record.score.code()));
    obj.insert("tags".into(), serde_json::to_value(record.tags).expect("tags serialize"));
    obj.insert("source".into(), serde_json::to_value(record.source).expect("source serialize"));
    obj.insert(
        "annotator_id".into(),
        record.annotator_id.clone().map(Value::from).unwrap_or(Value::Null),
    );
    obj.insert(
        "confidences".into(),
        match &record.confidences {
            Some(c) => serde_json::to_value(c).expect("confidences serialize"),
            None => Value::Null,
        },
    );
    obj.insert("created_at".into(), Value::from(format_timestamp(&record.created_at)));
    obj.insert("batch_id".into(), record.batch_id.clone().map(Value::from).unwrap_or(Value::Null));
    for (k, v) in &record.extra {
        obj.insert(k.clone(), v.clone());
    }
    Ok(serde_json::to_string(&Value::Object(obj)).expect("json serialize"))
}

/// Parses one manifest line. Line numbers in errors are 1 for this entry
/// point; streaming readers rewrite them.
pub fn parse_line(text: &str) -> Result<(AnnotationRecord, Vec<ParseWarning>), ManifestError> {
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) if e.classify() == serde_json::error::Category::Eof => {
            return Err(ManifestError::MissingField { line: 1, field: truncated_field(text) });
        }
        Err(e) => {
            return Err(ManifestError::Syntax { line: 1, column: e.column(), message: e.to_string() })
        }
    };
    let Value::Object(mut obj) = value else {
        return Err(ManifestError::Syntax { line: 1, column: 1, message: "expected a JSON object".into() });
    };
    for f in REQUIRED {
        if !obj.contains_key(f) {
            return Err(ManifestError::MissingField { line: 1, field: f.into() });
        }
    }
    let invalid = |field: &str, message: String| ManifestError::InvalidField {
        line: 1,
        field: field.into(),
        message,
    };

    let object_id = match obj.remove("object_id") {
        Some(Value::String(s)) => s,
        other => return Err(invalid("object_id", format!("expected string, got {other:?}"))),
    };
    let score: QualityScore = match obj.remove("score") {
        Some(Value::Number(n)) => n
            .as_u64()
            .and_then(|c| u8::try_from(c).ok())
            .and_then(QualityScore::from_code)
            .ok_or_else(|| invalid("score", format!("code {n} outside 0-3")))?,
        other => return Err(invalid("score", format!("expected integer 0-3, got {other:?}"))),
    };
    let tags: BinaryTagSet = serde_json::from_value(obj.remove("tags").unwrap_or(Value::Null))
        .map_err(|e| invalid("tags", e.to_string()))?;
    let source: Source = serde_json::from_value(obj.remove("source").unwrap_or(Value::Null))
        .map_err(|e| invalid("source", e.to_string()))?;
    let annotator_id = opt_string(obj.remove("annotator_id")).map_err(|m| invalid("annotator_id", m))?;
    let batch_id = opt_string(obj.remove("batch_id")).map_err(|m| invalid("batch_id", m))?;
    let confidences = match obj.remove("confidences") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<BTreeMap<String, f64>>(v)
                .map_err(|e| invalid("confidences", e.to_string()))?,
        ),
    };
    let created_at = match obj.remove("created_at") {
        Some(Value::String(s)) => DateTime::parse_from_rfc3339(&s)
            .map_err(|e| invalid("created_at", e.to_string()))?
            .with_timezone(&Utc),
        other => return Err(invalid("created_at", format!("expected timestamp string, got {other:?}"))),
    };

    let warnings = obj.keys().map(|k| ParseWarning::UnknownField(k.clone())).collect();
    let record = AnnotationRecord {
        object_id,
        score,
        tags,
        source,
        annotator_id,
        confidences,
        created_at,
        batch_id,
        extra: obj,
    };
    Ok((record, warnings))
}

fn opt_string(v: Option<Value>) -> Result<Option<String>, String> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(format!("expected string or null, got {other}")),
    }
}

// Best guess at which field a cut-off line lost: the first schema field whose
// key never appears, else the last one that started.
fn truncated_field(text: &str) -> String {
    let mut last_seen = None;
    for f in FIELDS {
        match text.find(&format!("\"{f}\"")) {
            Some(pos) => last_seen = Some((pos, f)),
            None if REQUIRED.contains(&f) => return f.to_string(),
            None => {}
        }
    }
    last_seen.map(|(_, f)| f.to_string()).unwrap_or_else(|| "object_id".into())
}

/// Parses a record and rejects it when it breaks a schema invariant.
pub fn parse_valid_line(text: &str) -> Result<(AnnotationRecord, Vec<ParseWarning>), ManifestError> {
    let (record, warnings) = parse_line(text)?;
    let violations = validate_record(&record);
    if !violations.is_empty() {
        return Err(ManifestError::Invalid { object_id: record.object_id, violations });
    }
    Ok((record, warnings))
}

/// One line of a manifest stream, keeping the original text.
#[derive(Debug, Clone)]
pub struct ManifestLine {
    pub line_no: usize,
    pub raw: String,
    pub record: AnnotationRecord,
}

/// Streams records from a reader. Blank lines are skipped; each item is
/// either a parsed line or an error carrying the 1-based line number.
pub fn read_manifest<R: BufRead>(reader: R) -> impl Iterator<Item = Result<ManifestLine, ManifestError>> {
    reader.lines().enumerate().filter_map(|(i, line)| {
        let line_no = i + 1;
        let raw = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(ManifestError::Io(e))),
        };
        if raw.trim().is_empty() {
            return None;
        }
        Some(match parse_valid_line(&raw) {
            Ok((record, _)) => Ok(ManifestLine { line_no, raw, record }),
            Err(e) => Err(e.at_line(line_no)),
        })
    })
}

/// Reads a whole manifest, failing on the first bad line.
pub fn read_all<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>, ManifestError> {
    read_manifest(reader).map(|r| r.map(|l| l.record)).collect()
}

/// Writes records as manifest lines, each terminated by `\n`.
pub fn write_all<'a, W: std::io::Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a AnnotationRecord>,
) -> Result<(), ManifestError> {
    for r in records {
        writeln!(w, "{}", to_line(r)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{head_names, Tag};
    use chrono::TimeZone;
    use proptest::prelude::*;

    const SAMPLE: &str = r#"{"object_id":"a1b2","score":2,"tags":{"is_transparent":false,"is_scene":true,"is_single_color":false,"is_multi_object":false,"is_figure":false},"source":"human","annotator_id":"ann-7","confidences":null,"created_at":"2025-03-04T05:06:07Z","batch_id":"b1","reviewer_note":{"k":[1,2]}}"#;

    #[test]
    fn unknown_field_preserved_bytewise() {
        let (rec, warnings) = parse_line(SAMPLE).unwrap();
        assert_eq!(warnings, vec![ParseWarning::UnknownField("reviewer_note".into())]);
        assert_eq!(rec.score, QualityScore::High);
        assert!(rec.tags.is_scene);
        assert_eq!(to_line(&rec).unwrap(), SAMPLE);
    }

    #[test]
    fn truncated_line_names_missing_field() {
        let cut = &SAMPLE[..SAMPLE.find("\"source\"").unwrap()];
        match parse_line(cut) {
            Err(ManifestError::MissingField { field, .. }) => assert_eq!(field, "source"),
            other => panic!("unexpected {other:?}"),
        }
        let cut = &SAMPLE[..SAMPLE.find("2025").unwrap()];
        match parse_line(cut) {
            Err(ManifestError::MissingField { field, .. }) => assert_eq!(field, "created_at"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn complete_line_without_required_field() {
        let line = r#"{"object_id":"x","score":1,"source":"human","created_at":"2025-03-04T05:06:07Z"}"#;
        match parse_line(line) {
            Err(ManifestError::MissingField { field, .. }) => assert_eq!(field, "tags"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partial_tag_object_rejected() {
        let line = SAMPLE.replace(r#""is_figure":false"#, "").replace(",}", "}");
        assert!(matches!(parse_line(&line), Err(ManifestError::InvalidField { ref field, .. }) if field == "tags"));
    }

    #[test]
    fn syntax_error_reports_column() {
        let err = parse_line(r#"{"object_id": x}"#).unwrap_err();
        assert!(matches!(err, ManifestError::Syntax { column, .. } if column > 1));
    }

    #[test]
    fn stream_reports_line_numbers() {
        let text = format!("{SAMPLE}\n\n{{bad\n{SAMPLE}\n");
        let items: Vec<_> = read_manifest(text.as_bytes()).collect();
        assert_eq!(items.len(), 3);
        assert!(items[0].is_ok());
        assert_eq!(items[1].as_ref().unwrap_err().line(), Some(3));
        assert_eq!(items[2].as_ref().unwrap().line_no, 4);
    }

    #[test]
    fn serialize_rejects_invalid() {
        let mut r = parse_line(SAMPLE).unwrap().0;
        r.source = Source::Model;
        assert!(matches!(to_line(&r), Err(ManifestError::Invalid { .. })));
    }

    fn arb_record() -> impl Strategy<Value = AnnotationRecord> {
        (
            "[a-z0-9_-]{1,16}",
            0u8..4,
            0u8..32,
            any::<bool>(),
            proptest::option::of("[a-zA-Z ]{0,8}"),
            proptest::option::of("[a-z0-9]{1,6}"),
            0i64..4_000_000_000,
            proptest::collection::vec(0.0f64..=1.0, 6),
        )
            .prop_map(|(id, score, bits, model, ann, batch, secs, probs)| {
                let mut r = AnnotationRecord::human(
                    id,
                    QualityScore::from_code(score).unwrap(),
                    BinaryTagSet::from_bits(bits),
                    Utc.timestamp_opt(secs, 0).unwrap(),
                );
                r.annotator_id = ann;
                r.batch_id = batch;
                if model {
                    r.source = Source::Model;
                    r.confidences = Some(head_names().map(String::from).zip(probs).collect());
                }
                r
            })
    }

    proptest! {
        #[test]
        fn roundtrip_identity(r in arb_record()) {
            let line = to_line(&r).unwrap();
            prop_assert!(!line.contains('\n'));
            let (back, warnings) = parse_line(&line).unwrap();
            prop_assert!(warnings.is_empty());
            prop_assert_eq!(back, r);
        }

        #[test]
        fn serialize_agrees_with_validation(mut r in arb_record(), flip in 0u8..4, v in -1.0f64..2.0) {
            match flip {
                0 => r.object_id.clear(),
                1 => r.source = if r.source == Source::Human { Source::Model } else { Source::Human },
                2 => if let Some(c) = r.confidences.as_mut() { c.insert(Tag::IsFigure.name().into(), v); },
                _ => {}
            }
            prop_assert_eq!(to_line(&r).is_ok(), validate_record(&r).is_empty());
        }
    }
}
