//! Workflow entities and the events that create and change them.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

/// Batch lifecycle. Transitions only move forward through this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchState {
    Open,
    Labeling,
    Validating,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Primary,
    Validator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub object_ids: Vec<String>,
    pub state: BatchState,
    pub created_at: DateTime<Utc>,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment_id: String,
    pub batch_id: String,
    pub object_id: String,
    pub annotator_id: String,
    pub role: Role,
    pub issued_at: DateTime<Utc>,
    pub completed: bool,
    /// Set when the lease lapsed and the task was reissued to someone else.
    pub revoked: bool,
}

/// One submitted version of an annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAnnotation {
    pub assignment_id: String,
    pub object_id: String,
    pub annotator_id: String,
    pub role: Role,
    pub version: u32,
    /// The record in manifest line format.
    pub line: String,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub discrepancy_id: String,
    pub batch_id: String,
    pub object_id: String,
    /// `score` or a tag name.
    pub field: String,
    pub primary_value: Value,
    pub validator_value: Value,
    pub resolved: bool,
    pub resolution: Option<Value>,
}

/// Append-only log entry. Replaying every event in order reconstructs the
/// full service state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    BatchCreated {
        batch_id: String,
        object_ids: Vec<String>,
        validation_fraction: f64,
        at: DateTime<Utc>,
    },
    BatchAdvanced {
        batch_id: String,
        to: BatchState,
        at: DateTime<Utc>,
    },
    TaskIssued {
        assignment_id: String,
        batch_id: String,
        object_id: String,
        annotator_id: String,
        role: Role,
        at: DateTime<Utc>,
    },
    AnnotationSubmitted {
        assignment_id: String,
        batch_id: String,
        line: String,
        at: DateTime<Utc>,
    },
    ValidationSampled {
        batch_id: String,
        seed: u64,
        object_ids: Vec<String>,
        at: DateTime<Utc>,
    },
    DiscrepancyResolved {
        batch_id: String,
        object_id: String,
        field: String,
        value: Value,
        at: DateTime<Utc>,
    },
}

impl Event {
    pub fn batch_id(&self) -> &str {
        match self {
            Event::BatchCreated { batch_id, .. }
            | Event::BatchAdvanced { batch_id, .. }
            | Event::TaskIssued { batch_id, .. }
            | Event::AnnotationSubmitted { batch_id, .. }
            | Event::ValidationSampled { batch_id, .. }
            | Event::DiscrepancyResolved { batch_id, .. } => batch_id,
        }
    }
}

pub fn discrepancy_id(batch_id: &str, object_id: &str, field: &str) -> String {
    format!("{batch_id}:{object_id}:{field}")
}
