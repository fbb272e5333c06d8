use axum::http::StatusCode;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("batch `{0}` already exists")]
    DuplicateBatch(String),
    #[error("object `{0}` appears more than once in the batch")]
    DuplicateObject(String),
    #[error("unknown batch `{0}`")]
    UnknownBatch(String),
    #[error("unknown assignment `{0}`")]
    UnknownAssignment(String),
    #[error("unknown discrepancy `{0}`")]
    UnknownDiscrepancy(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("batch `{0}` is not accepting tasks in state {1}")]
    BatchNotActive(String, String),
    #[error("batch `{0}` is not ready: {1}")]
    BatchNotReady(String, String),
    #[error("assignment `{0}` is stale: {1}")]
    StaleAssignment(String, String),
    #[error("record is for `{record}` but the assignment is for `{assignment}`")]
    ObjectMismatch { record: String, assignment: String },
    #[error("record violates schema: {}", .0.join("; "))]
    SchemaViolation(Vec<String>),
    #[error("unresolved discrepancies for objects: {}", .0.join(", "))]
    UnresolvedDiscrepancies(Vec<String>),
    #[error("event log: {0}")]
    Storage(#[from] std::io::Error),
    #[error("event log is corrupt at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
}

impl ServiceError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::InvalidRequest(_) => "invalid-request",
            ServiceError::DuplicateBatch(_) => "duplicate-batch-id",
            ServiceError::DuplicateObject(_) => "duplicate-object-within-batch",
            ServiceError::UnknownBatch(_) => "unknown-batch",
            ServiceError::UnknownAssignment(_) => "unknown-assignment",
            ServiceError::UnknownDiscrepancy(_) => "unknown-discrepancy",
            ServiceError::UnknownObject(_) => "unknown-object",
            ServiceError::BatchNotActive(..) => "batch-not-active",
            ServiceError::BatchNotReady(..) => "batch-not-ready",
            ServiceError::StaleAssignment(..) => "stale-assignment",
            ServiceError::ObjectMismatch { .. } => "object-mismatch",
            ServiceError::SchemaViolation(_) => "schema-violation",
            ServiceError::UnresolvedDiscrepancies(_) => "unresolved-discrepancies",
            ServiceError::Storage(_) => "storage",
            ServiceError::CorruptLog { .. } => "corrupt-log",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::InvalidRequest(_) | ServiceError::DuplicateObject(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownBatch(_)
            | ServiceError::UnknownAssignment(_)
            | ServiceError::UnknownDiscrepancy(_)
            | ServiceError::UnknownObject(_) => StatusCode::NOT_FOUND,
            ServiceError::DuplicateBatch(_)
            | ServiceError::BatchNotActive(..)
            | ServiceError::BatchNotReady(..)
            | ServiceError::StaleAssignment(..)
            | ServiceError::UnresolvedDiscrepancies(_) => StatusCode::CONFLICT,
            ServiceError::ObjectMismatch { .. } | ServiceError::SchemaViolation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Storage(_) | ServiceError::CorruptLog { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}
