//! Deterministic multiview renderer.
//!
//! Cameras sit on a spherical Fibonacci lattice around the mesh, ordered by
//! latitude then longitude, with a small seeded angular jitter. Each view is
//! rasterized in software with a z-buffer, flat headlight shading and a white
//! background, so identical inputs give bit-identical pixels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::mesh::{Bounds, MeshAsset};

pub const DEFAULT_VIEWS: usize = 40;
pub const DEFAULT_RESOLUTION: (usize, usize) = (224, 224);
const AMBIENT: f64 = 0.2;
const MID_GRAY: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("camera position coincides with its target")]
    DegeneratePose,
    #[error("camera up vector is parallel to the view direction")]
    ParallelUp,
    #[error("field of view {0} outside (0, 180)")]
    BadFov(f64),
    #[error("no camera poses given")]
    NoPoses,
    #[error("resolution must be at least 1x1")]
    BadResolution,
    #[error("invalid mesh: {0}")]
    Mesh(#[from] crate::mesh::MeshError),
}

impl CameraPose {
    pub fn validate(&self) -> Result<(), RenderError> {
        let dir = self.look_at - self.position;
        if dir.norm_squared() == 0.0 {
            return Err(RenderError::DegeneratePose);
        }
        if dir.cross(self.up).norm_squared() <= 1e-12 * dir.norm_squared() * self.up.norm_squared() {
            return Err(RenderError::ParallelUp);
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(RenderError::BadFov(self.fov_deg));
        }
        Ok(())
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        (right, up, forward)
    }
}

/// Camera placement options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPlan {
    pub n: usize,
    pub seed: u64,
    pub radius_scale: f64,
    pub fov_deg: f64,
    /// Upper bound of the per-pose angular perturbation; 0 disables it.
    pub jitter_deg: f64,
}

impl Default for CameraPlan {
    fn default() -> Self {
        Self { n: DEFAULT_VIEWS, seed: 0, radius_scale: 2.5, fov_deg: 40.0, jitter_deg: 5.0 }
    }
}

/// Unit directions of the Fibonacci lattice in canonical order
/// (ascending latitude, then longitude). The first lattice point is +Z.
pub fn lattice_directions(n: usize) -> Vec<Vec3> {
    if n == 1 {
        return vec![Vec3::Z];
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut dirs: Vec<Vec3> = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * i as f64 / (n - 1) as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect();
    dirs.sort_by(|a, b| {
        let key = |d: &Vec3| (d.z.clamp(-1.0, 1.0).asin(), d.y.atan2(d.x));
        let (la, lo) = key(a);
        let (lb, lob) = key(b);
        la.total_cmp(&lb).then(lo.total_cmp(&lob))
    });
    dirs
}

fn jitter(dir: Vec3, max_rad: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let theta = rng.gen::<f64>() * max_rad;
    let psi = rng.gen::<f64>() * std::f64::consts::TAU;
    let helper = if dir.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
    let t1 = dir.cross(helper).normalized();
    let t2 = dir.cross(t1);
    (dir * theta.cos() + (t1 * psi.cos() + t2 * psi.sin()) * theta.sin()).normalized()
}

/// Places `plan.n` cameras around the bounds' centroid.
pub fn plan_cameras(bounds: &Bounds, plan: &CameraPlan) -> Vec<CameraPose> {
    assert!(plan.n >= 1, "at least one view is required");
    let radius = if bounds.radius > 0.0 { bounds.radius } else { 1.0 };
    let distance = plan.radius_scale * radius;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let max_rad = plan.jitter_deg.to_radians();
    lattice_directions(plan.n)
        .into_iter()
        .map(|d| {
            let d = if max_rad > 0.0 { jitter(d, max_rad, &mut rng) } else { d };
            let up = if d.y.abs() > 0.99 { Vec3::Z } else { Vec3::Y };
            CameraPose { position: bounds.centroid + d * distance, look_at: bounds.centroid, up, fov_deg: plan.fov_deg }
        })
        .collect()
}

/// H x W x 3 image with values in [0,1], row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewStack {
    pub object_id: String,
    pub images: Vec<Image>,
    pub poses: Vec<CameraPose>,
    pub seed: u64,
    /// Set when every triangle had zero area; images are background only.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// (height, width)
    pub resolution: (usize, usize),
    pub edge_overlay: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, edge_overlay: false }
    }
}

pub fn render_views(
    asset: &MeshAsset,
    poses: &[CameraPose],
    seed: u64,
    opts: &RenderOptions,
) -> Result<ViewStack, RenderError> {
    if poses.is_empty() {
        return Err(RenderError::NoPoses);
    }
    if opts.resolution.0 == 0 || opts.resolution.1 == 0 {
        return Err(RenderError::BadResolution);
    }
    asset.validate()?;
    for p in poses {
        p.validate()?;
    }
    let degenerate = (0..asset.faces.len()).all(|f| asset.triangle_area(f) == 0.0);
    let images = poses.par_iter().map(|p| render_one(asset, p, opts, degenerate)).collect();
    Ok(ViewStack { object_id: asset.object_id.clone(), images, poses: poses.to_vec(), seed, degenerate })
}

/// Plans `plan.n` cameras around the mesh and renders them.
pub fn render_stack(asset: &MeshAsset, plan: &CameraPlan, opts: &RenderOptions) -> Result<ViewStack, RenderError> {
    asset.validate()?;
    let poses = plan_cameras(&asset.bounds(), plan);
    render_views(asset, &poses, plan.seed, opts)
}

struct Projected {
    px: f64,
    py: f64,
    inv_z: f64,
}

fn render_one(asset: &MeshAsset, pose: &CameraPose, opts: &RenderOptions, degenerate: bool) -> Image {
    let (h, w) = opts.resolution;
    let mut img = Image::filled(w, h, [1.0, 1.0, 1.0]);
    if degenerate {
        return img;
    }
    let mut depth = vec![f64::INFINITY; w * h];
    let (right, up, forward) = pose.basis();
    let focal = 1.0 / (pose.fov_deg.to_radians() * 0.5).tan();
    let aspect = w as f64 / h as f64;
    let near = 1e-9;
    let project = |p: Vec3| -> Option<Projected> {
        let rel = p - pose.position;
        let zc = rel.dot(forward);
        if zc <= near {
            return None;
        }
        let nx = focal / aspect * rel.dot(right) / zc;
        let ny = focal * rel.dot(up) / zc;
        Some(Projected { px: (nx + 1.0) * 0.5 * w as f64, py: (1.0 - ny) * 0.5 * h as f64, inv_z: 1.0 / zc })
    };
    let surface = &asset.surface;
    let plain = surface.is_plain();

    for (fi, face) in asset.faces.iter().enumerate() {
        let tri = asset.triangle(fi);
        let Some(pa) = project(tri[0]) else { continue };
        let Some(pb) = project(tri[1]) else { continue };
        let Some(pc) = project(tri[2]) else { continue };
        let area = edge(&pa, &pb, pc.px, pc.py);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let normal = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
        let nn = normal.norm();
        if nn == 0.0 {
            continue;
        }
        let center = (tri[0] + tri[1] + tri[2]) / 3.0;
        let to_cam = (pose.position - center).normalized();
        let intensity = AMBIENT + (1.0 - AMBIENT) * (normal.dot(to_cam) / nn).abs();

        let material = surface.face_materials.get(fi).and_then(|&m| surface.materials.get(m as usize));
        let texture = material.and_then(|m| m.texture).and_then(|t| surface.textures.get(t));
        let base = material.map(|m| m.base_color).unwrap_or([1.0; 3]);
        let vcol = surface.vertex_colors.as_ref().map(|c| [c[face[0] as usize], c[face[1] as usize], c[face[2] as usize]]);
        let uv = surface.uvs.as_ref().map(|u| [u[face[0] as usize], u[face[1] as usize], u[face[2] as usize]]);

        let min_x = pa.px.min(pb.px).min(pc.px).floor().max(0.0) as usize;
        let max_x = (pa.px.max(pb.px).max(pc.px).ceil().min(w as f64)) as usize;
        let min_y = pa.py.min(pb.py).min(pc.py).floor().max(0.0) as usize;
        let max_y = (pa.py.max(pb.py).max(pc.py).ceil().min(h as f64)) as usize;
        let lens = [
            ((pc.px - pb.px).hypot(pc.py - pb.py)),
            ((pa.px - pc.px).hypot(pa.py - pc.py)),
            ((pb.px - pa.px).hypot(pb.py - pa.py)),
        ];
        for y in min_y..max_y {
            let sy = y as f64 + 0.5;
            for x in min_x..max_x {
                let sx = x as f64 + 0.5;
                let w0 = edge(&pb, &pc, sx, sy) / area;
                let w1 = edge(&pc, &pa, sx, sy) / area;
                let w2 = edge(&pa, &pb, sx, sy) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 * pa.inv_z + w1 * pb.inv_z + w2 * pc.inv_z;
                let z = 1.0 / inv_z;
                let slot = y * w + x;
                if z >= depth[slot] {
                    continue;
                }
                depth[slot] = z;
                if opts.edge_overlay {
                    let abs_area = area.abs();
                    let dist = [w0 * abs_area / lens[0], w1 * abs_area / lens[1], w2 * abs_area / lens[2]];
                    if dist.iter().any(|&d| d < 0.5) {
                        img.put(x, y, [0.0; 3]);
                        continue;
                    }
                }
                let rgb = if plain {
                    MID_GRAY
                } else {
                    // perspective-correct weights
                    let pw = [w0 * pa.inv_z * z, w1 * pb.inv_z * z, w2 * pc.inv_z * z];
                    let mut c = base;
                    if let Some(vc) = &vcol {
                        for (k, ck) in c.iter_mut().enumerate() {
                            *ck *= (pw[0] * vc[0][k] as f64 + pw[1] * vc[1][k] as f64 + pw[2] * vc[2][k] as f64) as f32;
                        }
                    }
                    if let (Some(tex), Some(uv)) = (texture, &uv) {
                        let u = pw[0] * uv[0][0] as f64 + pw[1] * uv[1][0] as f64 + pw[2] * uv[2][0] as f64;
                        let v = pw[0] * uv[0][1] as f64 + pw[1] * uv[1][1] as f64 + pw[2] * uv[2][1] as f64;
                        let t = tex.sample(u, v);
                        for k in 0..3 {
                            c[k] *= t[k];
                        }
                    }
                    c
                };
                let shade = |v: f32| ((v as f64) * intensity).clamp(0.0, 1.0) as f32;
                img.put(x, y, [shade(rgb[0]), shade(rgb[1]), shade(rgb[2])]);
            }
        }
    }
    img
}

fn edge(a: &Projected, b: &Projected, x: f64, y: f64) -> f64 {
    (b.px - a.px) * (y - a.py) - (b.py - a.py) * (x - a.px)
}

/// Writes `<out>/<object_id>/view_NNN.png` and `poses.json`.
pub fn write_stack_png(stack: &ViewStack, out: &Path) -> std::io::Result<()> {
    let dir = out.join(&stack.object_id);
    std::fs::create_dir_all(&dir)?;
    for (i, img) in stack.images.iter().enumerate() {
        img.to_rgb8()
            .save_with_format(dir.join(format!("view_{i:03}.png")), image::ImageFormat::Png)
            .map_err(std::io::Error::other)?;
    }
    let poses = serde_json::json!({
        "object_id": stack.object_id,
        "seed": stack.seed,
        "degenerate": stack.degenerate,
        "poses": stack.poses,
    });
    std::fs::write(dir.join("poses.json"), serde_json::to_vec_pretty(&poses)?)?;
    Ok(())
}

/// Encodes one view as PNG bytes.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.to_rgb8().write_to(&mut buf, image::ImageFormat::Png).expect("png encode to memory");
    buf.into_inner()
}
