//! Procedural toy objects whose labels are deterministic functions of their
//! colours, for end-to-end training checks.
//!
//! Each object is an icosphere with flat per-face colours. The base colour
//! encodes the quality score; every positive tag paints a disjoint set of
//! faces in a marker colour. `is_single_color` is the absence of an accent
//! colour, so a single-coloured object shows only its base colour and the
//! markers of its other tags.
//!
//! All nine colours are fully saturated and 40 degrees apart in hue. Flat
//! shading only scales brightness, so hue survives rendering.

use std::collections::HashMap;

use chrono::{TimeZone, Utc};
use meshqa_core::labels::{AnnotationRecord, BinaryTagSet, QualityScore, Tag};
use meshqa_core::mesh::{extract_metadata, PlatformStats};
use meshqa_core::render::{render_stack, CameraPlan, RenderOptions};
use meshqa_core::{MeshAsset, Vec3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{AnnotatorConfig, BackboneSpec, OptimizerKind};
use crate::error::AnnotatorError;
use crate::train::{Sample, ViewInput};

/// Fully saturated colour of the given hue in degrees.
pub fn hue_color(hue: f64) -> [f32; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let x = (1.0 - (h % 2.0 - 1.0).abs()) as f32;
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Base colour per score code.
pub fn score_color(score: QualityScore) -> [f32; 3] {
    hue_color(80.0 * score.code() as f64)
}

/// Marker colour per tag.
pub fn marker_color(tag: Tag) -> [f32; 3] {
    let hue = match tag {
        Tag::IsMultiObject => 40.0,
        Tag::IsScene => 120.0,
        Tag::IsFigure => 200.0,
        Tag::IsTransparent => 280.0,
        Tag::IsSingleColor => 320.0,
    };
    hue_color(hue)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub n_objects: usize,
    pub seed: u64,
    pub n_views: usize,
    pub resolution: (usize, usize),
    pub subdivisions: u32,
    /// Fraction of faces painted per marker.
    pub marker_fraction: f64,
    /// Probability that each tag is set.
    pub tag_rate: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_objects: 600,
            seed: 7,
            n_views: 40,
            resolution: (24, 24),
            subdivisions: 1,
            marker_fraction: 0.12,
            tag_rate: 0.35,
        }
    }
}

/// Unit icosphere with shared vertices.
pub fn icosphere(subdivisions: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(|p| Vec3::from(p).normalized())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalized());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Builds one toy mesh. Vertices are unshared so per-vertex colours act as
/// per-face colours.
pub fn toy_mesh(
    object_id: &str,
    score: QualityScore,
    tags: BinaryTagSet,
    spec: &ToySpec,
    rng: &mut ChaCha8Rng,
) -> MeshAsset {
    let (sv, sf) = icosphere(spec.subdivisions);
    let mut face_color = vec![score_color(score); sf.len()];
    let mut order: Vec<usize> = (0..sf.len()).collect();
    order.shuffle(rng);
    let per_marker = ((spec.marker_fraction * sf.len() as f64).ceil() as usize).max(1);
    let mut cursor = 0;
    for tag in Tag::HEAD_ORDER {
        let painted = if tag == Tag::IsSingleColor { !tags.get(tag) } else { tags.get(tag) };
        if painted {
            for &f in &order[cursor..cursor + per_marker] {
                face_color[f] = marker_color(tag);
            }
            cursor += per_marker;
        }
    }
    let mut vertices = Vec::with_capacity(sf.len() * 3);
    let mut colors = Vec::with_capacity(sf.len() * 3);
    let mut faces = Vec::with_capacity(sf.len());
    for (f, tri) in sf.iter().enumerate() {
        let base = vertices.len() as u32;
        for &i in tri {
            vertices.push(sv[i as usize]);
            colors.push(face_color[f]);
        }
        faces.push([base, base + 1, base + 2]);
    }
    MeshAsset::new(object_id, vertices, faces).with_vertex_colors(colors)
}

/// Labelled toy samples rendered with the core renderer.
pub fn toy_dataset(spec: &ToySpec) -> Result<Vec<Sample>, AnnotatorError> {
    let created_at = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plans: Vec<_> = (0..spec.n_objects)
        .map(|i| {
            let score = QualityScore::from_code(rng.gen_range(0..4)).unwrap();
            let tags = BinaryTagSet::from_bits(Tag::ALL.iter().enumerate().fold(0u8, |bits, (k, _)| {
                bits | (u8::from(rng.gen_bool(spec.tag_rate)) << k)
            }));
            let stats = PlatformStats { view_count: rng.gen_range(0..5000), like_count: rng.gen_range(0..300) };
            (format!("toy-{i:04}"), score, tags, stats, rng.gen::<u64>())
        })
        .collect();
    plans
        .into_par_iter()
        .map(|(id, score, tags, stats, obj_seed)| {
            let mut orng = ChaCha8Rng::seed_from_u64(obj_seed);
            let mesh = toy_mesh(&id, score, tags, spec, &mut orng);
            let plan = CameraPlan { n: spec.n_views, seed: obj_seed, ..CameraPlan::default() };
            let opts = RenderOptions { resolution: spec.resolution, edge_overlay: false };
            let stack = render_stack(&mesh, &plan, &opts)
                .map_err(|e| AnnotatorError::ShapeMismatch(format!("rendering {id}: {e}")))?;
            let mut label = AnnotationRecord::human(&id, score, tags, created_at);
            label.annotator_id = Some("synthetic".into());
            Ok(Sample { views: ViewInput::Images(stack), metadata: extract_metadata(&mesh, Some(stats)), label })
        })
        .collect()
}

/// Small configuration that fits the toy set in seconds on one core.
pub fn toy_config(spec: &ToySpec, seed: u64) -> AnnotatorConfig {
    let mut cfg = AnnotatorConfig::new(BackboneSpec::tiny(32, spec.resolution, (16, 24)), 0.005, 10, 4);
    cfg.rnn_hidden = 48;
    cfg.attention_dim = 16;
    cfg.metadata_dim = 4;
    cfg.n_views = spec.n_views;
    cfg.seed = seed;
    cfg.optimizer = OptimizerKind::adam();
    cfg.grad_clip = Some(1.0);
    cfg
}
