use meshqa_core::chamfer::{
    chamfer_distance, compare_models, normalize_cloud, object_seed, sample_surface_points, NamedMesh, PointCloud,
    Winner,
};
use meshqa_core::mesh::unit_cube;
use meshqa_core::{MeshAsset, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(points: Vec<Vec3>) -> PointCloud {
    PointCloud { points, source_id: "c".into(), seed: 0 }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    cloud((0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
}

/// Double loop over both clouds, written directly from the definition.
fn brute_force(a: &[Vec3], b: &[Vec3]) -> f64 {
    let side = |from: &[Vec3], to: &[Vec3]| {
        let mut sum = 0.0;
        for x in from {
            let mut best = f64::INFINITY;
            for y in to {
                let (dx, dy, dz) = (x.x - y.x, x.y - y.y, x.z - y.z);
                best = best.min(dx * dx + dy * dy + dz * dz);
            }
            sum += best;
        }
        sum / from.len() as f64
    };
    side(a, b) + side(b, a)
}

#[test]
fn hand_case_is_two() {
    let a = cloud(vec![Vec3::new(0.0, 0.0, 0.0)]);
    let b = cloud(vec![Vec3::new(1.0, 0.0, 0.0)]);
    assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
}

#[test]
fn kd_tree_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let (na, nb) = (rng.gen_range(1..=256), rng.gen_range(1..=256));
        let a = random_cloud(&mut rng, na);
        let mut b = random_cloud(&mut rng, nb);
        // duplicates and shared points exercise ties in the tree
        if rng.gen_bool(0.3) {
            b.points.extend_from_slice(&a.points[..na.min(5)]);
            b.points.push(b.points[0]);
        }
        assert_eq!(chamfer_distance(&a, &b).unwrap(), brute_force(&a.points, &b.points));
    }
}

#[test]
fn identity_and_symmetry_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let (na, nb) = (rng.gen_range(1..=256), rng.gen_range(1..=256));
        let (a, b) = (random_cloud(&mut rng, na), random_cloud(&mut rng, nb));
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&b, &a).unwrap());
        assert!(chamfer_distance(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn scaling_multiplies_by_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let (a, b) = (random_cloud(&mut rng, 100), random_cloud(&mut rng, 80));
        let s = rng.gen_range(0.1..10.0);
        let scale = |c: &PointCloud| cloud(c.points.iter().map(|&p| p * s).collect());
        let base = chamfer_distance(&a, &b).unwrap();
        let scaled = chamfer_distance(&scale(&a), &scale(&b)).unwrap();
        assert!((scaled - s * s * base).abs() <= 1e-9 * scaled.max(1.0), "{scaled} vs {}", s * s * base);
    }
}

fn rotation(rng: &mut ChaCha8Rng) -> impl Fn(Vec3) -> Vec3 {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalized();
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let t = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    // Rodrigues' formula
    move |v: Vec3| v * angle.cos() + axis.cross(v) * angle.sin() + axis * (axis.dot(v) * (1.0 - angle.cos())) + t
}

#[test]
fn rigid_motion_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..200 {
        let (a, b) = (random_cloud(&mut rng, 120), random_cloud(&mut rng, 90));
        let m = rotation(&mut rng);
        let moved = |c: &PointCloud| cloud(c.points.iter().map(|&p| m(p)).collect());
        let before = chamfer_distance(&a, &b).unwrap();
        let after = chamfer_distance(&moved(&a), &moved(&b)).unwrap();
        assert!((before - after).abs() < 1e-9, "{before} vs {after}");
    }
}

#[test]
fn normalization_is_scale_invariant_and_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let a = random_cloud(&mut rng, 200);
    let (na, _) = normalize_cloud(&a).unwrap();
    let (nn, s) = normalize_cloud(&na).unwrap();
    assert!((s - 1.0).abs() < 1e-12);
    for (p, q) in na.points.iter().zip(&nn.points) {
        assert!((*p - *q).norm() < 1e-12);
    }
    let big = cloud(a.points.iter().map(|&p| p * 7.0).collect());
    let (nb, _) = normalize_cloud(&big).unwrap();
    for (p, q) in na.points.iter().zip(&nb.points) {
        assert!((*p - *q).norm() < 1e-9);
    }
}

#[test]
fn sampling_is_seeded() {
    let cube = unit_cube("cube");
    let a = sample_surface_points(&cube, 500, 3).unwrap();
    assert_eq!(a, sample_surface_points(&cube, 500, 3).unwrap());
    assert_ne!(a.points, sample_surface_points(&cube, 500, 4).unwrap().points);
    // every sample lies on the cube surface
    for p in &a.points {
        let m = p.x.abs().max(p.y.abs()).max(p.z.abs());
        assert!((m - 0.5).abs() < 1e-12);
    }
}

fn scaled_cube(name: &str, sx: f64, sy: f64, sz: f64) -> MeshAsset {
    unit_cube(name).map_vertices(|v| Vec3::new(v.x * sx, v.y * sy, v.z * sz))
}

fn wrap(v: &[(String, MeshAsset)]) -> Vec<NamedMesh<'_>> {
    v.iter().map(|(n, m)| NamedMesh { name: n, mesh: m }).collect()
}

fn by_id(v: &[MeshAsset]) -> Vec<NamedMesh<'_>> {
    v.iter().map(|m| NamedMesh { name: &m.object_id, mesh: m }).collect()
}

#[test]
fn comparison_winners_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let names: Vec<String> = (0..10).map(|i| format!("obj{i}")).collect();
    let mut refs = Vec::new();
    let mut cand_a = Vec::new();
    let mut cand_b = Vec::new();
    for name in &names {
        let r = scaled_cube(name, 1.0, rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
        let da = rng.gen_range(0.0..0.6);
        let db = rng.gen_range(0.0..0.6);
        cand_a.push(scaled_cube(name, 1.0 + da, 1.0, 1.0 - da / 2.0));
        cand_b.push(scaled_cube(name, 1.0 - db / 2.0, 1.0 + db, 1.0));
        refs.push(r);
    }
    let named = |v: &[MeshAsset]| -> Vec<(String, MeshAsset)> { names.iter().cloned().zip(v.iter().cloned()).collect() };
    let (r, a, b) = (named(&refs), named(&cand_a), named(&cand_b));
    let n_points = 200;
    let cmp = compare_models(&wrap(&r), &wrap(&a), &wrap(&b), n_points, 9).unwrap();
    assert_eq!(cmp.rows.len(), 10);
    for (i, row) in cmp.rows.iter().enumerate() {
        let s = object_seed(&names[i], 9);
        let norm = |m: &MeshAsset| normalize_cloud(&sample_surface_points(m, n_points, s).unwrap()).unwrap().0.points;
        let rc = norm(&refs[i]);
        let cd_a = brute_force(&norm(&cand_a[i]), &rc);
        let cd_b = brute_force(&norm(&cand_b[i]), &rc);
        assert_eq!((row.chamfer_model_a, row.chamfer_model_b), (cd_a, cd_b));
        assert_eq!(row.winner, Winner::decide(cd_a, cd_b));
    }
    assert_eq!(cmp.wins.a + cmp.wins.b + cmp.wins.ties, 10);
    let csv = cmp.to_csv();
    assert!(csv.starts_with("object_name,cd_a,cd_b,winner\n"));
    assert_eq!(csv.lines().count(), 12);
}

#[test]
fn exact_candidates_always_win() {
    let refs: Vec<MeshAsset> = (0..3).map(|i| scaled_cube(&format!("o{i}"), 1.0 + i as f64, 1.0, 1.0)).collect();
    let others: Vec<MeshAsset> = refs.iter().map(|m| m.map_vertices(|v| Vec3::new(v.x, v.y * 1.5, v.z))).collect();
    let cmp = compare_models(&by_id(&refs), &by_id(&refs), &by_id(&others), 300, 1).unwrap();
    assert_eq!(cmp.wins.a, 3);
    assert!(cmp.rows.iter().all(|r| r.chamfer_model_a == 0.0));
}
