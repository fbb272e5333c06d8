//! In-memory service state as a pure fold over the event log.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Duration, Utc};
use meshqa_core::labels::{AnnotationRecord, Tag, SCORE_HEAD};
use meshqa_core::manifest::parse_line;
use serde_json::Value;

use crate::model::{discrepancy_id, Assignment, Batch, BatchState, Discrepancy, Event, Role, StoredAnnotation};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct State {
    pub batches: BTreeMap<String, BatchData>,
    /// assignment id -> (batch id, index into that batch's assignments)
    assignment_index: HashMap<String, (String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchData {
    pub batch: Batch,
    pub assignments: Vec<Assignment>,
    pub annotations: Vec<StoredAnnotation>,
    /// Objects drawn for validation, in batch order.
    pub sample: Option<Vec<String>>,
    pub sample_seed: Option<u64>,
    /// (object id, field) -> final value
    pub resolutions: BTreeMap<(String, String), Value>,
    /// (object id, role) -> index of the latest version in `annotations`
    latest: HashMap<(String, Role), usize>,
}

impl State {
    pub fn apply(&mut self, event: &Event) -> Result<(), String> {
        if let Event::BatchCreated { batch_id, object_ids, validation_fraction, at } = event {
            if self.batches.contains_key(batch_id) {
                return Err(format!("batch `{batch_id}` created twice"));
            }
            let batch = Batch {
                batch_id: batch_id.clone(),
                object_ids: object_ids.clone(),
                state: BatchState::Open,
                created_at: *at,
                validation_fraction: *validation_fraction,
            };
            self.batches.insert(
                batch_id.clone(),
                BatchData {
                    batch,
                    assignments: Vec::new(),
                    annotations: Vec::new(),
                    sample: None,
                    sample_seed: None,
                    resolutions: BTreeMap::new(),
                    latest: HashMap::new(),
                },
            );
            return Ok(());
        }
        let bid = event.batch_id();
        let data = self.batches.get_mut(bid).ok_or_else(|| format!("event for unknown batch `{bid}`"))?;
        match event {
            Event::BatchCreated { .. } => unreachable!(),
            Event::BatchAdvanced { to, .. } => {
                if *to <= data.batch.state {
                    return Err(format!("batch `{bid}` cannot move from {:?} to {to:?}", data.batch.state));
                }
                data.batch.state = *to;
            }
            Event::TaskIssued { assignment_id, object_id, annotator_id, role, at, .. } => {
                for a in data.assignments.iter_mut() {
                    if a.object_id == *object_id && a.role == *role && !a.completed {
                        a.revoked = true;
                    }
                }
                data.assignments.push(Assignment {
                    assignment_id: assignment_id.clone(),
                    batch_id: bid.to_string(),
                    object_id: object_id.clone(),
                    annotator_id: annotator_id.clone(),
                    role: *role,
                    issued_at: *at,
                    completed: false,
                    revoked: false,
                });
                self.assignment_index.insert(assignment_id.clone(), (bid.to_string(), data.assignments.len() - 1));
            }
            Event::AnnotationSubmitted { assignment_id, line, at, .. } => {
                let a = data
                    .assignments
                    .iter_mut()
                    .find(|a| a.assignment_id == *assignment_id)
                    .ok_or_else(|| format!("submission for unknown assignment `{assignment_id}`"))?;
                a.completed = true;
                let (object_id, role, annotator_id) = (a.object_id.clone(), a.role, a.annotator_id.clone());
                let key = (object_id.clone(), role);
                let version = data.latest.get(&key).map_or(1, |&i| data.annotations[i].version + 1);
                data.latest.insert(key, data.annotations.len());
                data.annotations.push(StoredAnnotation {
                    assignment_id: assignment_id.clone(),
                    object_id,
                    annotator_id,
                    role,
                    version,
                    line: line.clone(),
                    submitted_at: *at,
                });
            }
            Event::ValidationSampled { seed, object_ids, .. } => {
                data.sample = Some(object_ids.clone());
                data.sample_seed = Some(*seed);
            }
            Event::DiscrepancyResolved { object_id, field, value, .. } => {
                data.resolutions.insert((object_id.clone(), field.clone()), value.clone());
            }
        }
        Ok(())
    }

    pub fn assignment(&self, id: &str) -> Option<(&BatchData, &Assignment)> {
        let (bid, i) = self.assignment_index.get(id)?;
        let data = self.batches.get(bid)?;
        Some((data, &data.assignments[*i]))
    }
}

/// Field names compared between primary and validator records, in report
/// order.
pub fn fields() -> impl Iterator<Item = &'static str> {
    std::iter::once(SCORE_HEAD).chain(Tag::ALL.into_iter().map(Tag::name))
}

pub fn field_value(record: &AnnotationRecord, field: &str) -> Value {
    match field.parse::<Tag>() {
        Ok(tag) => Value::Bool(record.tags.get(tag)),
        Err(_) => Value::from(record.score.code()),
    }
}

impl BatchData {
    pub fn latest(&self, object_id: &str, role: Role) -> Option<&StoredAnnotation> {
        self.latest.get(&(object_id.to_string(), role)).map(|&i| &self.annotations[i])
    }

    pub fn latest_record(&self, object_id: &str, role: Role) -> Option<AnnotationRecord> {
        self.latest(object_id, role).map(|s| parse_line(&s.line).expect("stored lines are valid").0)
    }

    /// An incomplete assignment still holding its lease at `now`.
    pub fn live_assignment(&self, object_id: &str, role: Role, now: DateTime<Utc>, lease: Duration) -> Option<&Assignment> {
        self.assignments
            .iter()
            .rev()
            .find(|a| a.object_id == object_id && a.role == role && !a.completed && !a.revoked)
            .filter(|a| a.issued_at + lease > now)
    }

    pub fn labeling_complete(&self) -> bool {
        self.batch.object_ids.iter().all(|o| self.latest(o, Role::Primary).is_some())
    }

    pub fn validation_complete(&self) -> bool {
        self.sample.as_ref().is_some_and(|s| s.iter().all(|o| self.latest(o, Role::Validator).is_some()))
    }

    /// Field-by-field differences between the latest primary and validator
    /// records of every sampled object that has both.
    pub fn discrepancies(&self) -> Vec<Discrepancy> {
        let mut out = Vec::new();
        let Some(sample) = &self.sample else { return out };
        for object_id in sample {
            let (Some(p), Some(v)) =
                (self.latest_record(object_id, Role::Primary), self.latest_record(object_id, Role::Validator))
            else {
                continue;
            };
            for field in fields() {
                let (pv, vv) = (field_value(&p, field), field_value(&v, field));
                if pv != vv {
                    let resolution = self.resolutions.get(&(object_id.clone(), field.to_string())).cloned();
                    out.push(Discrepancy {
                        discrepancy_id: discrepancy_id(&self.batch.batch_id, object_id, field),
                        batch_id: self.batch.batch_id.clone(),
                        object_id: object_id.clone(),
                        field: field.to_string(),
                        primary_value: pv,
                        validator_value: vv,
                        resolved: resolution.is_some(),
                        resolution,
                    });
                }
            }
        }
        out
    }

    /// The state the batch should move to given its current contents.
    pub fn due_transition(&self) -> Option<BatchState> {
        match self.batch.state {
            BatchState::Labeling if self.labeling_complete() => Some(if self.batch.validation_fraction == 0.0 {
                BatchState::Closed
            } else {
                BatchState::Validating
            }),
            BatchState::Validating
                if self.validation_complete() && self.discrepancies().iter().all(|d| d.resolved) =>
            {
                Some(BatchState::Closed)
            }
            _ => None,
        }
    }

    /// Latest primary record with resolved fields applied.
    pub fn final_record(&self, object_id: &str) -> Option<AnnotationRecord> {
        let mut r = self.latest_record(object_id, Role::Primary)?;
        for ((o, field), value) in &self.resolutions {
            if o != object_id {
                continue;
            }
            match field.parse::<Tag>() {
                Ok(tag) => r.tags.set(tag, value.as_bool().unwrap_or(r.tags.get(tag))),
                Err(_) => {
                    if let Some(q) = value.as_u64().and_then(|c| meshqa_core::QualityScore::from_code(c as u8)) {
                        r.score = q;
                    }
                }
            }
        }
        r.batch_id = Some(self.batch.batch_id.clone());
        Some(r)
    }
}
