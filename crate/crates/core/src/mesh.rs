//! Triangle mesh carrier and mesh statistics.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::labels::ObjectMetadata;
use crate::math::Vec3;

/// RGB texture, row-major, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub width: u32,
    pub height: u32,
    pub texels: Vec<[f32; 3]>,
}

impl Texture {
    /// Nearest-texel lookup with repeat wrapping.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let wrap = |t: f64, n: u32| -> usize {
            let f = t - t.floor();
            ((f * n as f64) as usize).min(n as usize - 1)
        };
        let x = wrap(u, self.width);
        let y = wrap(v, self.height);
        self.texels[y * self.width as usize + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub base_color: [f32; 3],
    pub texture: Option<usize>,
}

impl Default for Material {
    fn default() -> Self {
        Self { base_color: [1.0, 1.0, 1.0], texture: None }
    }
}

/// Optional appearance data. Empty when the file carried no color at all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Surface {
    pub vertex_colors: Option<Vec<[f32; 3]>>,
    pub uvs: Option<Vec<[f32; 2]>>,
    /// Material index per face; empty when no materials are referenced.
    pub face_materials: Vec<u32>,
    pub materials: Vec<Material>,
    pub textures: Vec<Texture>,
}

impl Surface {
    pub fn is_plain(&self) -> bool {
        self.vertex_colors.is_none() && self.face_materials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshAsset {
    pub object_id: String,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub surface: Surface,
    pub source_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: u32, count: usize },
    #[error("vertex {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("mesh has no triangles")]
    Empty,
    #[error("per-vertex attribute `{0}` has the wrong length")]
    AttributeLength(&'static str),
}

impl MeshAsset {
    pub fn new(object_id: impl Into<String>, vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Self {
        Self {
            object_id: object_id.into(),
            vertices,
            faces,
            surface: Surface::default(),
            source_path: PathBuf::new(),
        }
    }

    pub fn with_vertex_colors(mut self, colors: Vec<[f32; 3]>) -> Self {
        self.surface.vertex_colors = Some(colors);
        self
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.faces.is_empty() {
            return Err(MeshError::Empty);
        }
        let n = self.vertices.len();
        for (face, f) in self.faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i as usize >= n) {
                return Err(MeshError::IndexOutOfRange { face, index, count: n });
            }
        }
        if let Some(i) = self.vertices.iter().position(|v| !v.is_finite()) {
            return Err(MeshError::NonFinite(i));
        }
        if self.surface.vertex_colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err(MeshError::AttributeLength("vertex_colors"));
        }
        if self.surface.uvs.as_ref().is_some_and(|c| c.len() != n) {
            return Err(MeshError::AttributeLength("uvs"));
        }
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(c - a).norm() * 0.5
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::of_points(&self.vertices)
    }

    /// Appends another mesh, remapping its indices.
    pub fn append(&mut self, other: &MeshAsset) {
        let offset = self.vertices.len() as u32;
        let had_colors = self.surface.vertex_colors.is_some() || other.surface.vertex_colors.is_some();
        if had_colors {
            let mut colors = self
                .surface
                .vertex_colors
                .take()
                .unwrap_or_else(|| vec![[1.0; 3]; self.vertices.len()]);
            colors.extend(
                other
                    .surface
                    .vertex_colors
                    .clone()
                    .unwrap_or_else(|| vec![[1.0; 3]; other.vertices.len()]),
            );
            self.surface.vertex_colors = Some(colors);
        }
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]));
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> MeshAsset {
        let mut out = self.clone();
        out.vertices = self.vertices.iter().map(|&v| f(v)).collect();
        out
    }
}

/// Axis-aligned bounds plus the mean-of-vertices centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
    pub centroid: Vec3,
    /// Largest distance from the centroid to any point.
    pub radius: f64,
}

impl Bounds {
    pub fn of_points(points: &[Vec3]) -> Bounds {
        let mut min = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut max = -min;
        let mut sum = Vec3::ZERO;
        for &p in points {
            min = min.min(p);
            max = max.max(p);
            sum = sum + p;
        }
        let centroid = sum / points.len().max(1) as f64;
        let radius = points.iter().map(|&p| (p - centroid).norm()).fold(0.0, f64::max);
        Bounds { min, max, centroid, radius }
    }
}

/// Number of unique undirected edges over all faces.
pub fn unique_edge_count(faces: &[[u32; 3]]) -> usize {
    let mut edges = HashSet::with_capacity(faces.len() * 2);
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    edges.len()
}

/// Platform popularity counts for one object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
pub struct PlatformStats {
    pub view_count: u64,
    pub like_count: u64,
}

pub fn extract_metadata(asset: &MeshAsset, platform: Option<PlatformStats>) -> ObjectMetadata {
    let stats = platform.unwrap_or_default();
    ObjectMetadata {
        vertex_count: asset.vertices.len() as u64,
        edge_count: unique_edge_count(&asset.faces) as u64,
        view_count: stats.view_count,
        like_count: stats.like_count,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("reading platform stats: {0}")]
    Csv(#[from] csv::Error),
    #[error("platform stats header must be object_id,view_count,like_count; got {0}")]
    Header(String),
}

/// Loads the `object_id,view_count,like_count` CSV.
pub fn load_platform_stats(path: &Path) -> Result<HashMap<String, PlatformStats>, StatsError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != ["object_id", "view_count", "like_count"] {
        return Err(StatsError::Header(header.join(",")));
    }
    #[derive(Deserialize)]
    struct Row {
        object_id: String,
        view_count: u64,
        like_count: u64,
    }
    let mut out = HashMap::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        out.insert(row.object_id, PlatformStats { view_count: row.view_count, like_count: row.like_count });
    }
    Ok(out)
}

/// Axis-aligned unit cube centred on the origin: 8 vertices, 12 triangles,
/// outward winding.
pub fn unit_cube(object_id: &str) -> MeshAsset {
    let v = |x: f64, y: f64, z: f64| Vec3::new(x - 0.5, y - 0.5, z - 0.5);
    let vertices = vec![
        v(0.0, 0.0, 0.0),
        v(1.0, 0.0, 0.0),
        v(1.0, 1.0, 0.0),
        v(0.0, 1.0, 0.0),
        v(0.0, 0.0, 1.0),
        v(1.0, 0.0, 1.0),
        v(1.0, 1.0, 1.0),
        v(0.0, 1.0, 1.0),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [3, 7, 6],
        [3, 6, 2],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ];
    MeshAsset::new(object_id, vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_edges_match_bruteforce() {
        let cube = unit_cube("c");
        // brute force: every ordered pair of vertex slots, deduplicated by sorting
        let mut seen: Vec<(u32, u32)> = Vec::new();
        for f in &cube.faces {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let e = (f[i].min(f[j]), f[i].max(f[j]));
                        if !seen.contains(&e) {
                            seen.push(e);
                        }
                    }
                }
            }
        }
        assert_eq!(seen.len(), 18);
        let meta = extract_metadata(&cube, None);
        assert_eq!(meta.vertex_count, 8);
        assert_eq!(meta.edge_count, 18);
        // closed manifold: 3F = 2E
        assert_eq!(3 * cube.faces.len(), 2 * meta.edge_count as usize);
        assert_eq!((meta.view_count, meta.like_count), (0, 0));
    }

    #[test]
    fn single_triangle() {
        let m = MeshAsset::new(
            "t",
            vec![Vec3::ZERO, Vec3::X, Vec3::Y],
            vec![[0, 1, 2]],
        );
        let meta = extract_metadata(&m, Some(PlatformStats { view_count: 9, like_count: 12 }));
        assert_eq!((meta.vertex_count, meta.edge_count), (3, 3));
        assert_eq!((meta.view_count, meta.like_count), (9, 12));
    }

    #[test]
    fn validation_catches_bad_index_and_nan() {
        let mut m = unit_cube("c");
        m.faces.push([0, 1, 8]);
        assert_eq!(m.validate(), Err(MeshError::IndexOutOfRange { face: 12, index: 8, count: 8 }));
        let mut m = unit_cube("c");
        m.vertices[3].y = f64::NAN;
        assert_eq!(m.validate(), Err(MeshError::NonFinite(3)));
    }

    #[test]
    fn append_remaps_indices() {
        let mut a = unit_cube("a");
        a.append(&unit_cube("b"));
        assert_eq!(a.vertices.len(), 16);
        assert_eq!(a.faces.len(), 24);
        assert!(a.validate().is_ok());
        assert_eq!(a.faces[12], [8, 10, 9]);
    }

    #[test]
    fn platform_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        std::fs::write(&p, "object_id,view_count,like_count\nabc,10,2\nxyz,0,0\n").unwrap();
        let stats = load_platform_stats(&p).unwrap();
        assert_eq!(stats["abc"], PlatformStats { view_count: 10, like_count: 2 });
        std::fs::write(&p, "id,views,likes\nabc,10,2\n").unwrap();
        assert!(matches!(load_platform_stats(&p), Err(StatsError::Header(_))));
    }
}
