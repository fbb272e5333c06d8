//! Multiview annotation network.
//!
//! A per-view image backbone feeds an LSTM over the canonically ordered
//! views; attention pools the hidden states, a metadata embedding is
//! concatenated, and linear heads produce a 4-way quality score and five
//! binary tags. Everything runs in `f64` with hand-written gradients.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod loss;
pub mod model;
pub mod network;
pub mod predict;
pub mod synthetic;
pub mod train;

pub use config::{AnnotatorConfig, AttentionKind, BackboneKind, BackboneSpec, OptimizerKind, SequenceEncoder};
pub use error::AnnotatorError;
pub use loss::compute_loss;
pub use model::{EpochRecord, Thresholds, TrainedAnnotator};
pub use network::{HeadOutputs, Views};
pub use predict::{evaluate, Annotate, Annotator};
pub use train::{train, Sample, ViewInput};
