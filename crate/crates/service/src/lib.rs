//! Human labeling workflow: batches move OPEN → LABELING → VALIDATING →
//! CLOSED while annotators pull tasks, a seeded sample is re-annotated by a
//! second annotator, disagreements are resolved by hand and the result is
//! exported as a manifest.
//!
//! State is an append-only JSON-lines event log; replaying it rebuilds the
//! service exactly.

pub mod clock;
pub mod error;
pub mod http;
pub mod model;
pub mod service;
pub mod state;

pub use clock::{Clock, ManualClock, SystemClock};
pub use error::ServiceError;
pub use http::{router, serve, ANNOTATOR_HEADER};
pub use model::{Assignment, Batch, BatchState, Discrepancy, Event, Role, SCHEMA_VERSION};
pub use service::{Ack, Progress, Service, ServiceConfig};
