//! Surface sampling, normalization and chamfer distance between meshes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::math::Vec3;
use crate::mesh::MeshAsset;

pub const DEFAULT_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub source_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChamferError {
    #[error("mesh `{0}` has no triangle with positive area")]
    DegenerateMesh(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud has zero extent")]
    ZeroExtent,
    #[error("point cloud contains a non-finite coordinate")]
    NonFinite,
    #[error("object lists are not aligned: {0}")]
    NameMismatch(String),
}

/// Samples `n` points area-uniformly from the mesh surface.
pub fn sample_surface_points(asset: &MeshAsset, n: usize, seed: u64) -> Result<PointCloud, ChamferError> {
    let mut cumulative = Vec::with_capacity(asset.faces.len());
    let mut total = 0.0;
    for f in 0..asset.faces.len() {
        total += asset.triangle_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(ChamferError::DegenerateMesh(asset.object_id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let target = rng.gen::<f64>() * total;
            let f = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
            let [a, b, c] = asset.triangle(f);
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect();
    Ok(PointCloud { points, source_id: asset.object_id.clone(), seed })
}

/// Centers the cloud on its centroid and scales its bounding-box diagonal
/// to 1. Returns the normalized cloud and the applied scale factor.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, f64), ChamferError> {
    if cloud.points.is_empty() {
        return Err(ChamferError::EmptyCloud);
    }
    if cloud.points.iter().any(|p| !p.is_finite()) {
        return Err(ChamferError::NonFinite);
    }
    let bounds = crate::mesh::Bounds::of_points(&cloud.points);
    let diagonal = (bounds.max - bounds.min).norm();
    if diagonal == 0.0 {
        return Err(ChamferError::ZeroExtent);
    }
    let scale = 1.0 / diagonal;
    let points = cloud.points.iter().map(|&p| (p - bounds.centroid) * scale).collect();
    Ok((PointCloud { points, source_id: cloud.source_id.clone(), seed: cloud.seed }, scale))
}

/// Squared Euclidean distance with a fixed evaluation order.
#[inline]
pub fn squared_distance(a: Vec3, b: Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Static 3-d tree over a point slice for exact nearest-neighbour queries.
pub struct KdTree<'a> {
    points: &'a [Vec3],
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(points, &mut order[..], 0, &mut nodes);
        Self { points, nodes, root }
    }

    fn build_rec(points: &[Vec3], idx: &mut [usize], depth: usize, nodes: &mut Vec<KdNode>) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, hi, depth + 1, nodes);
        nodes.push(KdNode { point, axis, left, right });
        Some(nodes.len() - 1)
    }

    /// Smallest squared distance from `q` to any point in the tree.
    pub fn nearest_squared(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        if let Some(r) = self.root {
            self.search(r, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: Vec3, best: &mut f64) {
        let n = &self.nodes[node];
        let p = self.points[n.point];
        let d = squared_distance(q, p);
        if d < *best {
            *best = d;
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            if diff * diff <= *best {
                self.search(c, q, best);
            }
        }
    }
}

/// Whether per-side terms use squared or plain Euclidean distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChamferVariant {
    #[default]
    Squared,
    Euclidean,
}

fn one_side(from: &[Vec3], tree: &KdTree<'_>, variant: ChamferVariant) -> f64 {
    let mut sum = 0.0;
    for &p in from {
        let d = tree.nearest_squared(p);
        sum += match variant {
            ChamferVariant::Squared => d,
            ChamferVariant::Euclidean => d.sqrt(),
        };
    }
    sum / from.len() as f64
}

/// Symmetric chamfer distance: mean nearest-neighbour (squared) distance
/// from A to B plus from B to A.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64, ChamferError> {
    chamfer_distance_with(a, b, ChamferVariant::Squared)
}

pub fn chamfer_distance_with(a: &PointCloud, b: &PointCloud, variant: ChamferVariant) -> Result<f64, ChamferError> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(ChamferError::EmptyCloud);
    }
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    Ok(one_side(&a.points, &tb, variant) + one_side(&b.points, &ta, variant))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Winner {
    A,
    B,
    #[serde(rename = "TIE")]
    Tie,
}

impl Winner {
    pub fn decide(cd_a: f64, cd_b: f64) -> Winner {
        let scale = cd_a.abs().max(cd_b.abs());
        if (cd_a - cd_b).abs() <= 1e-6 * scale {
            Winner::Tie
        } else if cd_a < cd_b {
            Winner::A
        } else {
            Winner::B
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Winner::A => "A",
            Winner::B => "B",
            Winner::Tie => "TIE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub object_name: String,
    pub chamfer_model_a: f64,
    pub chamfer_model_b: f64,
    pub winner: Winner,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WinCounts {
    pub a: usize,
    pub b: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub wins: WinCounts,
}

/// Per-object sampling seed: leading 8 bytes of SHA-256(name) XOR run seed.
pub fn object_seed(name: &str, run_seed: u64) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap()) ^ run_seed
}

/// A named mesh triple for comparison.
pub struct NamedMesh<'a> {
    pub name: &'a str,
    pub mesh: &'a MeshAsset,
}

/// Compares two candidate sets against references, object by object.
pub fn compare_models(
    references: &[NamedMesh<'_>],
    candidates_a: &[NamedMesh<'_>],
    candidates_b: &[NamedMesh<'_>],
    n_points: usize,
    seed: u64,
) -> Result<Comparison, ChamferError> {
    if references.len() != candidates_a.len() || references.len() != candidates_b.len() {
        return Err(ChamferError::NameMismatch(format!(
            "{} references, {} A candidates, {} B candidates",
            references.len(),
            candidates_a.len(),
            candidates_b.len()
        )));
    }
    let mut rows = Vec::with_capacity(references.len());
    let mut wins = WinCounts::default();
    for ((r, a), b) in references.iter().zip(candidates_a).zip(candidates_b) {
        if r.name != a.name || r.name != b.name {
            return Err(ChamferError::NameMismatch(format!("{} / {} / {}", r.name, a.name, b.name)));
        }
        let s = object_seed(r.name, seed);
        let cloud = |m: &MeshAsset| -> Result<PointCloud, ChamferError> {
            Ok(normalize_cloud(&sample_surface_points(m, n_points, s)?)?.0)
        };
        let rc = cloud(r.mesh)?;
        let cd_a = chamfer_distance(&cloud(a.mesh)?, &rc)?;
        let cd_b = chamfer_distance(&cloud(b.mesh)?, &rc)?;
        let winner = Winner::decide(cd_a, cd_b);
        match winner {
            Winner::A => wins.a += 1,
            Winner::B => wins.b += 1,
            Winner::Tie => wins.ties += 1,
        }
        rows.push(ComparisonRow { object_name: r.name.to_string(), chamfer_model_a: cd_a, chamfer_model_b: cd_b, winner });
    }
    Ok(Comparison { rows, wins })
}

impl Comparison {
    /// CSV with header `object_name,cd_a,cd_b,winner` and a trailing
    /// aggregate line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("object_name,cd_a,cd_b,winner\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.object_name, r.chamfer_model_a, r.chamfer_model_b, r.winner.label()));
        }
        out.push_str(&format!("# wins: A={} B={} TIE={}\n", self.wins.a, self.wins.b, self.wins.ties));
        out
    }

    /// Bar-chart friendly JSON: one entry per object with both distances.
    pub fn to_chart_json(&self) -> serde_json::Value {
        serde_json::json!({
            "objects": self.rows.iter().map(|r| &r.object_name).collect::<Vec<_>>(),
            "cd_a": self.rows.iter().map(|r| r.chamfer_model_a).collect::<Vec<_>>(),
            "cd_b": self.rows.iter().map(|r| r.chamfer_model_b).collect::<Vec<_>>(),
            "wins": self.wins,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_cube;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud { points, source_id: "t".into(), seed: 0 }
    }

    fn unit_square() -> MeshAsset {
        MeshAsset::new(
            "sq",
            vec![Vec3::ZERO, Vec3::X, Vec3::new(1.0, 1.0, 0.0), Vec3::Y],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    #[test]
    fn hand_case() {
        let a = cloud(vec![Vec3::ZERO]);
        let b = cloud(vec![Vec3::X]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn square_sampling_centroid() {
        let c = sample_surface_points(&unit_square(), 100_000, 9).unwrap();
        let mean = c.points.iter().fold(Vec3::ZERO, |acc, &p| acc + p) / c.points.len() as f64;
        assert!((mean.x - 0.5).abs() < 0.01 && (mean.y - 0.5).abs() < 0.01 && mean.z == 0.0);
    }

    #[test]
    fn single_sample_lies_on_surface() {
        let c = sample_surface_points(&unit_square(), 1, 4).unwrap();
        assert_eq!(c.points.len(), 1);
        let p = c.points[0];
        assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y) && p.z == 0.0);
        assert_eq!(sample_surface_points(&unit_square(), 1, 4).unwrap(), c);
    }

    #[test]
    fn degenerate_mesh_cannot_be_sampled() {
        let m = MeshAsset::new("d", vec![Vec3::ZERO, Vec3::X, Vec3::X], vec![[0, 1, 2]]);
        assert_eq!(sample_surface_points(&m, 3, 0), Err(ChamferError::DegenerateMesh("d".into())));
    }

    #[test]
    fn cube_corners_normalize_to_unit_diagonal() {
        let corners = unit_cube("c").vertices.iter().map(|&v| v + Vec3::new(0.5, 0.5, 0.5)).collect();
        let (n, scale) = normalize_cloud(&cloud(corners)).unwrap();
        assert!((scale - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        let b = crate::mesh::Bounds::of_points(&n.points);
        assert!(((b.max - b.min).norm() - 1.0).abs() < 1e-12);
        assert!(b.centroid.norm() < 1e-15);
        let (again, s2) = normalize_cloud(&n).unwrap();
        assert!((s2 - 1.0).abs() < 1e-12);
        for (p, q) in again.points.iter().zip(&n.points) {
            assert!((*p - *q).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_extent_rejected() {
        assert_eq!(normalize_cloud(&cloud(vec![Vec3::X; 3])), Err(ChamferError::ZeroExtent));
        assert_eq!(normalize_cloud(&cloud(vec![])), Err(ChamferError::EmptyCloud));
    }

    #[test]
    fn winner_tie_band() {
        assert_eq!(Winner::decide(1.0, 1.0 + 1e-9), Winner::Tie);
        assert_eq!(Winner::decide(0.0, 0.0), Winner::Tie);
        assert_eq!(Winner::decide(0.5, 1.0), Winner::A);
        assert_eq!(Winner::decide(2.0, 1.0), Winner::B);
    }

    #[test]
    fn identical_candidate_wins() {
        let reference = unit_cube("r");
        let other = unit_square();
        let refs = [NamedMesh { name: "x", mesh: &reference }];
        let a = [NamedMesh { name: "x", mesh: &reference }];
        let b = [NamedMesh { name: "x", mesh: &other }];
        let cmp = compare_models(&refs, &a, &b, 500, 1).unwrap();
        assert_eq!(cmp.rows[0].chamfer_model_a, 0.0);
        assert_eq!(cmp.rows[0].winner, Winner::A);
        assert_eq!(cmp.wins, WinCounts { a: 1, b: 0, ties: 0 });
        let bad = [NamedMesh { name: "y", mesh: &other }];
        assert!(matches!(compare_models(&refs, &a, &bad, 10, 1), Err(ChamferError::NameMismatch(_))));
        assert!(cmp.to_csv().starts_with("object_name,cd_a,cd_b,winner\nx,0,"));
    }
}
