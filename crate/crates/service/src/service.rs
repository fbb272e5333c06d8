//! Workflow operations over an event-sourced store.
//!
//! Every mutation is planned against the current state, appended to the
//! log as one write, then folded into memory. A single lock serializes
//! mutations, so task issuance can never hand the same object to two
//! annotators.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::Duration;
use meshqa_core::labels::{validate_record, AnnotationRecord, Source, Tag};
use meshqa_core::manifest::to_line;
use meshqa_core::render::ViewStack;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::clock::Clock;
use crate::error::ServiceError;
use crate::model::{
    Assignment, Batch, BatchState, Discrepancy, Event, Role, StoredAnnotation, DEFAULT_VALIDATION_FRACTION,
};
use crate::state::{BatchData, State};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// How long an unfinished task stays reserved for its annotator.
    pub lease: Duration,
    /// Directory of `<object_id>.glb` files served to the viewer.
    pub assets_dir: Option<PathBuf>,
    pub views: usize,
    pub view_resolution: (usize, usize),
    pub view_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            lease: Duration::minutes(30),
            assets_dir: None,
            views: meshqa_core::render::DEFAULT_VIEWS,
            view_resolution: meshqa_core::render::DEFAULT_RESOLUTION,
            view_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Progress {
    pub n_objects: usize,
    pub labeled: usize,
    pub sample_size: Option<usize>,
    pub validated: usize,
    pub open_discrepancies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub assignment_id: String,
    pub object_id: String,
    pub version: u32,
    pub batch_state: BatchState,
}

struct Inner {
    state: State,
    log: Option<File>,
}

pub struct Service {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    pub config: ServiceConfig,
    pub(crate) views: Mutex<HashMap<String, Arc<ViewStack>>>,
}

impl Service {
    /// A service whose state lives only in memory.
    pub fn in_memory(clock: Arc<dyn Clock>, config: ServiceConfig) -> Self {
        Self { inner: Mutex::new(Inner { state: State::default(), log: None }), clock, config, views: Mutex::default() }
    }

    /// Opens (or creates) an event log and replays it. A torn final line
    /// from an interrupted write is dropped.
    pub fn open(path: &Path, clock: Arc<dyn Clock>, config: ServiceConfig) -> Result<Self, ServiceError> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            log::warn!("dropping {} bytes of incomplete event at end of {}", text.len() - complete, path.display());
            file.set_len(complete as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        let mut state = State::default();
        for (i, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(line)
                .map_err(|e| ServiceError::CorruptLog { line: i + 1, message: e.to_string() })?;
            state.apply(&event).map_err(|message| ServiceError::CorruptLog { line: i + 1, message })?;
        }
        Ok(Self { inner: Mutex::new(Inner { state, log: Some(file) }), clock, config, views: Mutex::default() })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Copy of the current state.
    pub fn snapshot(&self) -> State {
        self.lock().state.clone()
    }

    fn commit(&self, inner: &mut Inner, events: Vec<Event>) -> Result<(), ServiceError> {
        if events.is_empty() {
            return Ok(());
        }
        // dry run first so a rejected event never reaches the log
        let mut next = inner.state.clone();
        for e in &events {
            next.apply(e).map_err(ServiceError::InvalidRequest)?;
        }
        if let Some(f) = inner.log.as_mut() {
            let mut buf = String::new();
            for e in &events {
                buf.push_str(&serde_json::to_string(e).expect("event serializes"));
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
            f.sync_data()?;
        }
        inner.state = next;
        Ok(())
    }

    /// Appends the state transitions that `events` make due.
    fn with_transitions(&self, state: &State, batch_id: &str, mut events: Vec<Event>) -> Vec<Event> {
        let mut scratch = state.clone();
        for e in &events {
            let _ = scratch.apply(e);
        }
        let mut data = scratch.batches.remove(batch_id).expect("batch exists");
        let at = self.clock.now();
        while let Some(to) = data.due_transition() {
            data.batch.state = to;
            events.push(Event::BatchAdvanced { batch_id: batch_id.to_string(), to, at });
        }
        events
    }

    pub fn create_batch(
        &self,
        batch_id: Option<String>,
        object_ids: Vec<String>,
        validation_fraction: Option<f64>,
    ) -> Result<Batch, ServiceError> {
        let fraction = validation_fraction.unwrap_or(DEFAULT_VALIDATION_FRACTION);
        if !(0.0..=1.0).contains(&fraction) {
            return Err(ServiceError::InvalidRequest(format!("validation_fraction {fraction} outside [0,1]")));
        }
        if object_ids.is_empty() {
            return Err(ServiceError::InvalidRequest("object_ids is empty".into()));
        }
        let mut seen = HashSet::new();
        for o in &object_ids {
            if o.is_empty() {
                return Err(ServiceError::InvalidRequest("empty object id".into()));
            }
            if !seen.insert(o) {
                return Err(ServiceError::DuplicateObject(o.clone()));
            }
        }
        let mut inner = self.lock();
        let batch_id = match batch_id {
            Some(id) if id.is_empty() => return Err(ServiceError::InvalidRequest("empty batch id".into())),
            Some(id) if inner.state.batches.contains_key(&id) => return Err(ServiceError::DuplicateBatch(id)),
            Some(id) => id,
            None => (inner.state.batches.len() + 1..)
                .map(|k| format!("batch-{k:04}"))
                .find(|id| !inner.state.batches.contains_key(id))
                .unwrap(),
        };
        let event =
            Event::BatchCreated { batch_id: batch_id.clone(), object_ids, validation_fraction: fraction, at: self.clock.now() };
        self.commit(&mut inner, vec![event])?;
        Ok(inner.state.batches[&batch_id].batch.clone())
    }

    pub fn batch(&self, batch_id: &str) -> Result<(Batch, Progress), ServiceError> {
        let inner = self.lock();
        let data = batch_data(&inner.state, batch_id)?;
        let count = |role| data.batch.object_ids.iter().filter(|o| data.latest(o, role).is_some()).count();
        let progress = Progress {
            n_objects: data.batch.object_ids.len(),
            labeled: count(Role::Primary),
            sample_size: data.sample.as_ref().map(Vec::len),
            validated: count(Role::Validator),
            open_discrepancies: data.discrepancies().iter().filter(|d| !d.resolved).count(),
        };
        Ok((data.batch.clone(), progress))
    }

    pub fn batches(&self) -> Vec<Batch> {
        self.lock().state.batches.values().map(|d| d.batch.clone()).collect()
    }

    /// Next task for `annotator_id`, or `None` when nothing is available.
    /// An annotator holding an unfinished task gets that task back.
    pub fn next_task(&self, batch_id: &str, annotator_id: &str) -> Result<(Option<Assignment>, BatchState), ServiceError> {
        if annotator_id.is_empty() {
            return Err(ServiceError::InvalidRequest("annotator id is required".into()));
        }
        let mut inner = self.lock();
        let now = self.clock.now();
        let mut events = Vec::new();
        {
            let data = batch_data(&inner.state, batch_id)?;
            if data.batch.state == BatchState::Open {
                events.push(Event::BatchAdvanced { batch_id: batch_id.into(), to: BatchState::Labeling, at: now });
            }
        }
        self.commit(&mut inner, std::mem::take(&mut events))?;
        let data = batch_data(&inner.state, batch_id)?;
        let role = match data.batch.state {
            BatchState::Labeling => Role::Primary,
            BatchState::Validating => Role::Validator,
            s => return Err(ServiceError::BatchNotActive(batch_id.into(), format!("{s:?}").to_uppercase())),
        };
        if let Some(a) =
            data.assignments.iter().find(|a| a.annotator_id == annotator_id && a.role == role && !a.completed && !a.revoked)
        {
            return Ok((Some(a.clone()), data.batch.state));
        }
        let pool: Vec<&String> = match role {
            Role::Primary => data.batch.object_ids.iter().collect(),
            Role::Validator => data.sample.iter().flatten().collect(),
        };
        let lease = self.config.lease;
        let pick = pool.into_iter().find(|o| {
            data.latest(o, role).is_none()
                && data.live_assignment(o, role, now, lease).is_none()
                && (role == Role::Primary || data.latest(o, Role::Primary).is_some_and(|p| p.annotator_id != annotator_id))
        });
        let Some(object_id) = pick.cloned() else {
            return Ok((None, data.batch.state));
        };
        let k = data.assignments.iter().filter(|a| a.object_id == object_id && a.role == role).count() + 1;
        let role_name = match role {
            Role::Primary => "primary",
            Role::Validator => "validator",
        };
        let assignment_id = format!("{batch_id}/{object_id}/{role_name}/{k}");
        let event = Event::TaskIssued {
            assignment_id: assignment_id.clone(),
            batch_id: batch_id.into(),
            object_id,
            annotator_id: annotator_id.into(),
            role,
            at: now,
        };
        self.commit(&mut inner, vec![event])?;
        let (data, a) = inner.state.assignment(&assignment_id).expect("just issued");
        Ok((Some(a.clone()), data.batch.state))
    }

    /// Stores a new version of the annotation for an assignment. The
    /// record's `annotator_id` and `batch_id` are taken from the assignment.
    pub fn submit(
        &self,
        assignment_id: &str,
        annotator_id: Option<&str>,
        mut record: AnnotationRecord,
    ) -> Result<Ack, ServiceError> {
        let mut inner = self.lock();
        let (data, a) =
            inner.state.assignment(assignment_id).ok_or_else(|| ServiceError::UnknownAssignment(assignment_id.into()))?;
        if let Some(who) = annotator_id {
            if who != a.annotator_id {
                return Err(ServiceError::InvalidRequest(format!(
                    "assignment `{assignment_id}` belongs to `{}`, not `{who}`",
                    a.annotator_id
                )));
            }
        }
        if a.revoked {
            return Err(ServiceError::StaleAssignment(assignment_id.into(), "lease expired and task was reissued".into()));
        }
        let open = match a.role {
            Role::Primary => data.sample.is_none() && data.batch.state < BatchState::Closed,
            Role::Validator => data.batch.state == BatchState::Validating,
        };
        if !open {
            return Err(ServiceError::StaleAssignment(
                assignment_id.into(),
                format!("batch is {:?}", data.batch.state).to_uppercase(),
            ));
        }
        if record.object_id != a.object_id {
            return Err(ServiceError::ObjectMismatch { record: record.object_id, assignment: a.object_id.clone() });
        }
        if record.source != Source::Human {
            return Err(ServiceError::SchemaViolation(vec!["source: submitted annotations must be human".into()]));
        }
        record.annotator_id = Some(a.annotator_id.clone());
        record.batch_id = Some(data.batch.batch_id.clone());
        let violations = validate_record(&record);
        if !violations.is_empty() {
            return Err(ServiceError::SchemaViolation(violations.iter().map(|v| v.to_string()).collect()));
        }
        let line = to_line(&record).map_err(|e| ServiceError::SchemaViolation(vec![e.to_string()]))?;
        let batch_id = data.batch.batch_id.clone();
        let (object_id, role) = (a.object_id.clone(), a.role);
        let submitted = Event::AnnotationSubmitted {
            assignment_id: assignment_id.into(),
            batch_id: batch_id.clone(),
            line,
            at: self.clock.now(),
        };
        let events = self.with_transitions(&inner.state, &batch_id, vec![submitted]);
        self.commit(&mut inner, events)?;
        let data = &inner.state.batches[&batch_id];
        let version = data.latest(&object_id, role).map(|s| s.version).unwrap_or(1);
        Ok(Ack { assignment_id: assignment_id.into(), object_id, version, batch_state: data.batch.state })
    }

    /// All stored versions for one object in a batch, oldest first.
    pub fn annotations(&self, batch_id: &str, object_id: &str) -> Result<Vec<StoredAnnotation>, ServiceError> {
        let inner = self.lock();
        let data = batch_data(&inner.state, batch_id)?;
        if !data.batch.object_ids.iter().any(|o| o == object_id) {
            return Err(ServiceError::UnknownObject(object_id.into()));
        }
        Ok(data.annotations.iter().filter(|s| s.object_id == object_id).cloned().collect())
    }

    /// Draws `ceil(fraction * n)` objects for validation. Repeating the
    /// call with the same seed returns the same sample.
    pub fn sample_for_validation(&self, batch_id: &str, seed: u64) -> Result<(Vec<String>, BatchState), ServiceError> {
        let mut inner = self.lock();
        let data = batch_data(&inner.state, batch_id)?;
        if let Some(sample) = &data.sample {
            return if data.sample_seed == Some(seed) {
                Ok((sample.clone(), data.batch.state))
            } else {
                Err(ServiceError::BatchNotReady(
                    batch_id.into(),
                    format!("already sampled with seed {}", data.sample_seed.unwrap_or_default()),
                ))
            };
        }
        if data.batch.state != BatchState::Validating {
            let why = match data.batch.state {
                BatchState::Closed => "batch is closed".to_string(),
                _ => "labeling is not complete".to_string(),
            };
            return Err(ServiceError::BatchNotReady(batch_id.into(), why));
        }
        let n = data.batch.object_ids.len();
        let k = ((data.batch.validation_fraction * n as f64).ceil() as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        let sample: Vec<String> = chosen.into_iter().map(|i| data.batch.object_ids[i].clone()).collect();
        let event =
            Event::ValidationSampled { batch_id: batch_id.into(), seed, object_ids: sample.clone(), at: self.clock.now() };
        let events = self.with_transitions(&inner.state, batch_id, vec![event]);
        self.commit(&mut inner, events)?;
        Ok((sample, inner.state.batches[batch_id].batch.state))
    }

    /// Disagreements between primary and validator annotations. Available
    /// once every validation task is complete.
    pub fn discrepancies(&self, batch_id: &str) -> Result<Vec<Discrepancy>, ServiceError> {
        let inner = self.lock();
        let data = batch_data(&inner.state, batch_id)?;
        let ready = data.batch.state == BatchState::Closed
            || (data.batch.state == BatchState::Validating && data.validation_complete());
        if !ready {
            return Err(ServiceError::BatchNotReady(batch_id.into(), "validation is not complete".into()));
        }
        Ok(data.discrepancies())
    }

    /// Sets the final value of a disputed field: an integer score code for
    /// `score`, a boolean for a tag.
    pub fn resolve(&self, discrepancy_id: &str, value: Value) -> Result<(Discrepancy, BatchState), ServiceError> {
        let mut inner = self.lock();
        let found = inner
            .state
            .batches
            .values()
            .filter(|d| d.batch.state >= BatchState::Validating)
            .flat_map(|d| d.discrepancies())
            .find(|d| d.discrepancy_id == discrepancy_id)
            .ok_or_else(|| ServiceError::UnknownDiscrepancy(discrepancy_id.into()))?;
        let valid = match found.field.parse::<Tag>() {
            Ok(_) => value.is_boolean(),
            Err(_) => value.as_u64().is_some_and(|c| c < 4),
        };
        if !valid {
            return Err(ServiceError::InvalidRequest(format!("value {value} is not valid for field `{}`", found.field)));
        }
        let batch_id = found.batch_id.clone();
        if inner.state.batches[&batch_id].batch.state == BatchState::Closed {
            return Err(ServiceError::BatchNotActive(batch_id, "CLOSED".into()));
        }
        let event = Event::DiscrepancyResolved {
            batch_id: batch_id.clone(),
            object_id: found.object_id.clone(),
            field: found.field.clone(),
            value,
            at: self.clock.now(),
        };
        let events = self.with_transitions(&inner.state, &batch_id, vec![event]);
        self.commit(&mut inner, events)?;
        let data = &inner.state.batches[&batch_id];
        let updated = data.discrepancies().into_iter().find(|d| d.discrepancy_id == discrepancy_id).expect("still present");
        Ok((updated, data.batch.state))
    }

    /// Manifest lines of the final annotation per object, sorted by object
    /// id. With `resolved_only`, every batch must be closed with all
    /// discrepancies resolved.
    pub fn export(&self, batch_ids: &[String], resolved_only: bool) -> Result<String, ServiceError> {
        let inner = self.lock();
        let mut records: BTreeMap<String, AnnotationRecord> = BTreeMap::new();
        for batch_id in batch_ids {
            let data = batch_data(&inner.state, batch_id)?;
            if resolved_only {
                let mut open: Vec<String> =
                    data.discrepancies().into_iter().filter(|d| !d.resolved).map(|d| d.object_id).collect();
                open.dedup();
                if !open.is_empty() {
                    return Err(ServiceError::UnresolvedDiscrepancies(open));
                }
                if data.batch.state != BatchState::Closed {
                    return Err(ServiceError::BatchNotReady(batch_id.clone(), "batch is not closed".into()));
                }
            }
            for o in &data.batch.object_ids {
                if let Some(r) = data.final_record(o) {
                    records.insert(o.clone(), r);
                }
            }
        }
        let mut out = String::new();
        for r in records.values() {
            out.push_str(&to_line(r).map_err(|e| ServiceError::SchemaViolation(vec![e.to_string()]))?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn batch_data<'a>(state: &'a State, batch_id: &str) -> Result<&'a BatchData, ServiceError> {
    state.batches.get(batch_id).ok_or_else(|| ServiceError::UnknownBatch(batch_id.into()))
}
