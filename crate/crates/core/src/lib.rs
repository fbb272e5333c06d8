//! Core toolkit for 3D asset quality annotation and dataset curation.
//!
//! - [`labels`] and [`manifest`]: the label schema and its line format
//! - [`gltf_io`], [`mesh`], [`cache`]: mesh ingestion and local caching
//! - [`render`]: deterministic multiview software renderer
//! - [`metrics`]: score / tag evaluation
//! - [`curation`]: manifest filtering and distribution tables
//! - [`fixtures`]: record sets with known tag prevalence
//! - [`chamfer`]: surface sampling and chamfer-distance comparison

pub mod cache;
pub mod chamfer;
pub mod curation;
pub mod fixtures;
pub mod gltf_io;
pub mod labels;
pub mod manifest;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod render;

pub use labels::{
    score_from_decision_tree, validate_record, AnnotationRecord, BinaryTagSet, ObjectMetadata, QualityScore,
    RubricAnswers, Source, Tag,
};
pub use math::Vec3;
pub use mesh::MeshAsset;
