//! glTF 2.0 reader (`.gltf` and `.glb`) producing triangulated
//! [`MeshAsset`]s, plus a minimal GLB writer for generated meshes.
//!
//! Node transforms of the default scene are baked into vertex positions.
//! Triangle strips and fans are converted to triangle lists; point and
//! line primitives are skipped.

use std::path::{Path, PathBuf};

use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use crate::math::{Mat4, Vec3};
use crate::mesh::{Material, MeshAsset, Surface, Texture};

const GLB_MAGIC: u32 = 0x4654_6C67;
const CHUNK_JSON: u32 = 0x4E4F_534A;
const CHUNK_BIN: u32 = 0x004E_4942;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("mesh has no triangles")]
    EmptyMesh,
}

fn corrupt(msg: impl Into<String>) -> IngestError {
    IngestError::CorruptContainer(msg.into())
}

/// Loads a `.glb` or `.gltf` file. The object id is the file stem.
pub fn load_mesh(path: &Path) -> Result<MeshAsset, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    let object_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
    let base_dir = path.parent().map(Path::to_path_buf);
    let mut asset = match ext.as_deref() {
        Some("glb") => parse_glb(&bytes, &object_id, base_dir.as_deref())?,
        Some("gltf") => parse_gltf_json(&bytes, None, &object_id, base_dir.as_deref())?,
        _ if bytes.starts_with(b"glTF") => parse_glb(&bytes, &object_id, base_dir.as_deref())?,
        other => {
            return Err(IngestError::UnsupportedFormat(format!(
                "{} (extension {:?}); only glTF 2.0 is supported",
                path.display(),
                other.unwrap_or_default()
            )))
        }
    };
    asset.source_path = path.to_path_buf();
    Ok(asset)
}

/// Parses an in-memory GLB container.
pub fn parse_glb(bytes: &[u8], object_id: &str, base_dir: Option<&Path>) -> Result<MeshAsset, IngestError> {
    let u32_at = |off: usize| -> Result<u32, IngestError> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt(format!("unexpected end of GLB at byte {off}")))
    };
    if u32_at(0)? != GLB_MAGIC {
        return Err(IngestError::UnsupportedFormat("missing glTF magic".into()));
    }
    let version = u32_at(4)?;
    if version != 2 {
        return Err(IngestError::UnsupportedFormat(format!("GLB version {version}")));
    }
    let total = u32_at(8)? as usize;
    if total > bytes.len() {
        return Err(corrupt(format!("header length {total} exceeds file size {}", bytes.len())));
    }
    let mut off = 12;
    let mut json_chunk = None;
    let mut bin_chunk = None;
    while off + 8 <= total {
        let len = u32_at(off)? as usize;
        let kind = u32_at(off + 4)?;
        let start = off + 8;
        let end = start.checked_add(len).filter(|&e| e <= total).ok_or_else(|| {
            corrupt(format!("chunk at byte {off} with length {len} overruns container of {total} bytes"))
        })?;
        match kind {
            CHUNK_JSON if json_chunk.is_none() => json_chunk = Some(&bytes[start..end]),
            CHUNK_BIN if bin_chunk.is_none() => bin_chunk = Some(&bytes[start..end]),
            _ => {}
        }
        off = end + (4 - end % 4) % 4;
    }
    let json_chunk = json_chunk.ok_or_else(|| corrupt("GLB has no JSON chunk"))?;
    parse_gltf_json(json_chunk, bin_chunk, object_id, base_dir)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct Doc {
    asset: Option<AssetInfo>,
    #[serde(default)]
    buffers: Vec<BufferDef>,
    #[serde(default)]
    buffer_views: Vec<ViewDef>,
    #[serde(default)]
    accessors: Vec<AccessorDef>,
    #[serde(default)]
    meshes: Vec<MeshDef>,
    #[serde(default)]
    nodes: Vec<NodeDef>,
    #[serde(default)]
    scenes: Vec<SceneDef>,
    scene: Option<usize>,
    #[serde(default)]
    materials: Vec<MaterialDef>,
    #[serde(default)]
    textures: Vec<TextureDef>,
    #[serde(default)]
    images: Vec<ImageDef>,
}

#[derive(Deserialize)]
struct AssetInfo {
    version: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct BufferDef {
    uri: Option<String>,
    byte_length: usize,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ViewDef {
    buffer: usize,
    #[serde(default)]
    byte_offset: usize,
    byte_length: usize,
    byte_stride: Option<usize>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AccessorDef {
    buffer_view: Option<usize>,
    #[serde(default)]
    byte_offset: usize,
    component_type: u32,
    #[serde(default)]
    normalized: bool,
    count: usize,
    #[serde(rename = "type")]
    kind: String,
    sparse: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct MeshDef {
    primitives: Vec<PrimitiveDef>,
}

#[derive(Deserialize)]
struct PrimitiveDef {
    attributes: std::collections::HashMap<String, usize>,
    indices: Option<usize>,
    material: Option<usize>,
    #[serde(default = "default_mode")]
    mode: u32,
}

fn default_mode() -> u32 {
    4
}

#[derive(Deserialize)]
struct NodeDef {
    mesh: Option<usize>,
    #[serde(default)]
    children: Vec<usize>,
    matrix: Option<[f64; 16]>,
    translation: Option<[f64; 3]>,
    rotation: Option<[f64; 4]>,
    scale: Option<[f64; 3]>,
}

#[derive(Deserialize)]
struct SceneDef {
    #[serde(default)]
    nodes: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct MaterialDef {
    pbr_metallic_roughness: Option<PbrDef>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct PbrDef {
    base_color_factor: Option<[f64; 4]>,
    base_color_texture: Option<TextureRef>,
}

#[derive(Deserialize)]
struct TextureRef {
    index: usize,
}

#[derive(Deserialize)]
struct TextureDef {
    source: Option<usize>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ImageDef {
    uri: Option<String>,
    buffer_view: Option<usize>,
}

struct Loader<'a> {
    doc: Doc,
    buffers: Vec<std::borrow::Cow<'a, [u8]>>,
}

fn load_uri(uri: &str, base_dir: Option<&Path>) -> Result<Vec<u8>, IngestError> {
    if let Some(rest) = uri.strip_prefix("data:") {
        let (_, data) = rest
            .split_once(";base64,")
            .ok_or_else(|| IngestError::UnsupportedFormat("non-base64 data URI".into()))?;
        return base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|e| corrupt(format!("bad base64 payload: {e}")));
    }
    let path = base_dir.map(|d| d.join(uri)).unwrap_or_else(|| PathBuf::from(uri));
    std::fs::read(&path).map_err(|source| IngestError::Io { path, source })
}

/// Parses glTF JSON with an optional embedded binary chunk.
pub fn parse_gltf_json(
    json: &[u8],
    bin: Option<&[u8]>,
    object_id: &str,
    base_dir: Option<&Path>,
) -> Result<MeshAsset, IngestError> {
    let doc: Doc = serde_json::from_slice(json).map_err(|e| corrupt(format!("invalid glTF JSON: {e}")))?;
    match &doc.asset {
        Some(a) if a.version.starts_with('2') => {}
        Some(a) => return Err(IngestError::UnsupportedFormat(format!("glTF version {}", a.version))),
        None => return Err(corrupt("missing `asset` object")),
    }
    let mut buffers = Vec::with_capacity(doc.buffers.len());
    for (i, b) in doc.buffers.iter().enumerate() {
        let data: std::borrow::Cow<[u8]> = match (&b.uri, i, bin) {
            (Some(uri), _, _) => load_uri(uri, base_dir)?.into(),
            (None, 0, Some(bin)) => bin.into(),
            (None, _, _) => return Err(corrupt(format!("buffer {i} has no data source"))),
        };
        if data.len() < b.byte_length {
            return Err(corrupt(format!(
                "buffer {i} declares {} bytes but only {} are present",
                b.byte_length,
                data.len()
            )));
        }
        buffers.push(data);
    }
    Loader { doc, buffers }.build(object_id, base_dir)
}

fn component_size(ct: u32) -> Result<usize, IngestError> {
    match ct {
        5120 | 5121 => Ok(1),
        5122 | 5123 => Ok(2),
        5125 | 5126 => Ok(4),
        other => Err(corrupt(format!("unknown component type {other}"))),
    }
}

fn component_count(kind: &str) -> Result<usize, IngestError> {
    match kind {
        "SCALAR" => Ok(1),
        "VEC2" => Ok(2),
        "VEC3" => Ok(3),
        "VEC4" => Ok(4),
        "MAT2" => Ok(4),
        "MAT3" => Ok(9),
        "MAT4" => Ok(16),
        other => Err(corrupt(format!("unknown accessor type {other}"))),
    }
}

impl<'a> Loader<'a> {
    fn view_bytes(&self, index: usize) -> Result<(&[u8], Option<usize>), IngestError> {
        let v = self
            .doc
            .buffer_views
            .get(index)
            .ok_or_else(|| corrupt(format!("bufferView {index} does not exist")))?;
        let buf = self
            .buffers
            .get(v.buffer)
            .ok_or_else(|| corrupt(format!("bufferView {index} references missing buffer {}", v.buffer)))?;
        let end = v
            .byte_offset
            .checked_add(v.byte_length)
            .filter(|&e| e <= buf.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "bufferView {index} range {}+{} exceeds buffer {} of {} bytes",
                    v.byte_offset,
                    v.byte_length,
                    v.buffer,
                    buf.len()
                ))
            })?;
        Ok((&buf[v.byte_offset..end], v.byte_stride))
    }

    /// Reads an accessor as rows of f64 components. Normalized integer
    /// components are mapped to [0,1] / [-1,1].
    fn read_accessor(&self, index: usize) -> Result<Vec<Vec<f64>>, IngestError> {
        let acc = self
            .doc
            .accessors
            .get(index)
            .ok_or_else(|| corrupt(format!("accessor {index} does not exist")))?;
        if acc.sparse.is_some() {
            return Err(IngestError::UnsupportedFormat(format!("sparse accessor {index}")));
        }
        let csize = component_size(acc.component_type)?;
        let ncomp = component_count(&acc.kind)?;
        let elem = csize * ncomp;
        let Some(view_index) = acc.buffer_view else {
            return Ok(vec![vec![0.0; ncomp]; acc.count]);
        };
        let (bytes, stride) = self.view_bytes(view_index)?;
        let stride = stride.unwrap_or(elem);
        if stride < elem {
            return Err(corrupt(format!("accessor {index}: stride {stride} smaller than element size {elem}")));
        }
        if acc.count > 0 {
            let needed = (acc.count - 1)
                .checked_mul(stride)
                .and_then(|v| v.checked_add(acc.byte_offset))
                .and_then(|v| v.checked_add(elem));
            if needed.is_none_or(|n| n > bytes.len()) {
                return Err(corrupt(format!(
                    "accessor {index} ({} x {elem} bytes at offset {}) exceeds bufferView {view_index} of {} bytes",
                    acc.count,
                    acc.byte_offset,
                    bytes.len()
                )));
            }
        }
        let read = |b: &[u8]| -> f64 {
            match acc.component_type {
                5120 => {
                    let v = b[0] as i8 as f64;
                    if acc.normalized { (v / 127.0).max(-1.0) } else { v }
                }
                5121 => {
                    let v = b[0] as f64;
                    if acc.normalized { v / 255.0 } else { v }
                }
                5122 => {
                    let v = i16::from_le_bytes([b[0], b[1]]) as f64;
                    if acc.normalized { (v / 32767.0).max(-1.0) } else { v }
                }
                5123 => {
                    let v = u16::from_le_bytes([b[0], b[1]]) as f64;
                    if acc.normalized { v / 65535.0 } else { v }
                }
                5125 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
                _ => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            }
        };
        Ok((0..acc.count)
            .map(|i| {
                let base = acc.byte_offset + i * stride;
                (0..ncomp).map(|c| read(&bytes[base + c * csize..])).collect()
            })
            .collect())
    }

    fn decode_textures(&self, base_dir: Option<&Path>) -> Vec<Option<Texture>> {
        self.doc
            .textures
            .iter()
            .map(|t| {
                let img = self.doc.images.get(t.source?)?;
                let bytes: Vec<u8> = match (&img.uri, img.buffer_view) {
                    (Some(uri), _) => load_uri(uri, base_dir).ok()?,
                    (None, Some(v)) => self.view_bytes(v).ok()?.0.to_vec(),
                    _ => return None,
                };
                match image::load_from_memory(&bytes) {
                    Ok(decoded) => {
                        let rgb = decoded.to_rgb8();
                        Some(Texture {
                            width: rgb.width(),
                            height: rgb.height(),
                            texels: rgb
                                .pixels()
                                .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
                                .collect(),
                        })
                    }
                    Err(e) => {
                        log::warn!("skipping undecodable texture: {e}");
                        None
                    }
                }
            })
            .collect()
    }

    fn mesh_instances(&self) -> Result<Vec<(usize, Mat4)>, IngestError> {
        let roots: Vec<usize> = match self.doc.scenes.get(self.doc.scene.unwrap_or(0)) {
            Some(s) => s.nodes.clone(),
            None if self.doc.nodes.is_empty() => {
                return Ok((0..self.doc.meshes.len()).map(|m| (m, Mat4::IDENTITY)).collect())
            }
            None => {
                // no scene: every node that is nobody's child is a root
                let mut is_child = vec![false; self.doc.nodes.len()];
                for n in &self.doc.nodes {
                    for &c in &n.children {
                        if let Some(slot) = is_child.get_mut(c) {
                            *slot = true;
                        }
                    }
                }
                (0..self.doc.nodes.len()).filter(|&i| !is_child[i]).collect()
            }
        };
        let mut out = Vec::new();
        let mut stack: Vec<(usize, Mat4, usize)> = roots.into_iter().rev().map(|n| (n, Mat4::IDENTITY, 0)).collect();
        while let Some((index, parent, depth)) = stack.pop() {
            if depth > 64 {
                return Err(corrupt("node hierarchy too deep or cyclic"));
            }
            let node = self
                .doc
                .nodes
                .get(index)
                .ok_or_else(|| corrupt(format!("node {index} does not exist")))?;
            let local = match node.matrix {
                Some(m) => Mat4(m),
                None => Mat4::from_trs(
                    node.translation.unwrap_or([0.0; 3]),
                    node.rotation.unwrap_or([0.0, 0.0, 0.0, 1.0]),
                    node.scale.unwrap_or([1.0; 3]),
                ),
            };
            let world = parent.mul(&local);
            if let Some(m) = node.mesh {
                out.push((m, world));
            }
            for &c in node.children.iter().rev() {
                stack.push((c, world, depth + 1));
            }
        }
        Ok(out)
    }

    fn build(self, object_id: &str, base_dir: Option<&Path>) -> Result<MeshAsset, IngestError> {
        let textures = self.decode_textures(base_dir);
        let mut tex_slots: Vec<Option<usize>> = vec![None; textures.len()];
        let mut surface = Surface::default();
        for (i, t) in textures.into_iter().enumerate() {
            if let Some(t) = t {
                tex_slots[i] = Some(surface.textures.len());
                surface.textures.push(t);
            }
        }
        surface.materials = self
            .doc
            .materials
            .iter()
            .map(|m| {
                let pbr = m.pbr_metallic_roughness.as_ref();
                let f = pbr.and_then(|p| p.base_color_factor).unwrap_or([1.0; 4]);
                Material {
                    base_color: [f[0] as f32, f[1] as f32, f[2] as f32],
                    texture: pbr
                        .and_then(|p| p.base_color_texture.as_ref())
                        .and_then(|t| tex_slots.get(t.index).copied().flatten()),
                }
            })
            .collect();

        let mut vertices: Vec<Vec3> = Vec::new();
        let mut faces: Vec<[u32; 3]> = Vec::new();
        let mut colors: Vec<[f32; 3]> = Vec::new();
        let mut uvs: Vec<[f32; 2]> = Vec::new();
        let mut face_materials: Vec<u32> = Vec::new();
        let (mut any_color, mut any_uv, mut any_material) = (false, false, false);
        let default_material = surface.materials.len() as u32;

        for (mesh_index, transform) in self.mesh_instances()? {
            let mesh = self
                .doc
                .meshes
                .get(mesh_index)
                .ok_or_else(|| corrupt(format!("mesh {mesh_index} does not exist")))?;
            for (pi, prim) in mesh.primitives.iter().enumerate() {
                if prim.mode < 4 {
                    log::warn!("{object_id}: mesh {mesh_index} primitive {pi} has point/line mode {}; skipped", prim.mode);
                    continue;
                }
                if prim.mode > 6 {
                    return Err(corrupt(format!("primitive mode {} is not defined", prim.mode)));
                }
                let pos_index = *prim
                    .attributes
                    .get("POSITION")
                    .ok_or_else(|| corrupt(format!("mesh {mesh_index} primitive {pi} lacks POSITION")))?;
                let positions = self.read_accessor(pos_index)?;
                if positions.first().is_some_and(|p| p.len() != 3) {
                    return Err(corrupt("POSITION accessor is not VEC3"));
                }
                let n = positions.len();
                let indices: Vec<u32> = match prim.indices {
                    Some(ix) => self
                        .read_accessor(ix)?
                        .into_iter()
                        .map(|r| r[0] as u32)
                        .collect(),
                    None => (0..n as u32).collect(),
                };
                if let Some(&bad) = indices.iter().find(|&&i| i as usize >= n) {
                    return Err(corrupt(format!("index {bad} out of range for {n} vertices")));
                }
                let tris = triangulate(&indices, prim.mode);
                let offset = vertices.len() as u32;
                let prev_faces = faces.len();
                vertices.extend(positions.iter().map(|p| transform.transform_point(Vec3::new(p[0], p[1], p[2]))));
                faces.extend(tris.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));

                match prim.attributes.get("COLOR_0") {
                    Some(&ci) => {
                        let c = self.read_accessor(ci)?;
                        if c.len() != n {
                            return Err(corrupt("COLOR_0 count differs from POSITION count"));
                        }
                        if !any_color {
                            colors.resize(offset as usize, [1.0; 3]);
                            any_color = true;
                        }
                        colors.extend(c.iter().map(|r| [r[0] as f32, r[1] as f32, r[2] as f32]));
                    }
                    None if any_color => colors.resize(vertices.len(), [1.0; 3]),
                    None => {}
                }
                match prim.attributes.get("TEXCOORD_0") {
                    Some(&ti) => {
                        let t = self.read_accessor(ti)?;
                        if t.len() != n {
                            return Err(corrupt("TEXCOORD_0 count differs from POSITION count"));
                        }
                        if !any_uv {
                            uvs.resize(offset as usize, [0.0; 2]);
                            any_uv = true;
                        }
                        uvs.extend(t.iter().map(|r| [r[0] as f32, r[1] as f32]));
                    }
                    None if any_uv => uvs.resize(vertices.len(), [0.0; 2]),
                    None => {}
                }
                let mat = match prim.material {
                    Some(m) if m < surface.materials.len() => {
                        any_material = true;
                        m as u32
                    }
                    Some(m) => return Err(corrupt(format!("material {m} does not exist"))),
                    None => default_material,
                };
                face_materials.resize(prev_faces, default_material);
                face_materials.extend(std::iter::repeat_n(mat, faces.len() - prev_faces));
            }
        }
        if faces.is_empty() {
            return Err(IngestError::EmptyMesh);
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(format!("vertex {i} has a non-finite coordinate")));
        }
        if any_color {
            colors.resize(vertices.len(), [1.0; 3]);
            surface.vertex_colors = Some(colors);
        }
        if any_uv {
            uvs.resize(vertices.len(), [0.0; 2]);
            surface.uvs = Some(uvs);
        }
        if any_material {
            surface.materials.push(Material::default());
            surface.face_materials = face_materials;
        } else {
            surface.materials.clear();
            surface.textures.clear();
        }
        Ok(MeshAsset {
            object_id: object_id.to_string(),
            vertices,
            faces,
            surface,
            source_path: PathBuf::new(),
        })
    }
}

fn triangulate(indices: &[u32], mode: u32) -> Vec<[u32; 3]> {
    match mode {
        4 => indices.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        5 => (2..indices.len())
            .map(|i| {
                if i % 2 == 0 {
                    [indices[i - 2], indices[i - 1], indices[i]]
                } else {
                    [indices[i - 1], indices[i - 2], indices[i]]
                }
            })
            .collect(),
        6 => (2..indices.len()).map(|i| [indices[0], indices[i - 1], indices[i]]).collect(),
        _ => Vec::new(),
    }
}

/// Encodes meshes as a single GLB with one primitive per mesh: f32
/// positions, u32 indices and, when present, f32 vertex colors.
pub fn encode_glb(meshes: &[&MeshAsset]) -> Vec<u8> {
    let mut bin: Vec<u8> = Vec::new();
    let mut views = Vec::new();
    let mut accessors = Vec::new();
    let mut primitives = Vec::new();
    let mut push_view = |bin: &mut Vec<u8>, data: Vec<u8>, target: u32| -> usize {
        while bin.len() % 4 != 0 {
            bin.push(0);
        }
        let offset = bin.len();
        bin.extend_from_slice(&data);
        views.push(json!({"buffer": 0, "byteOffset": offset, "byteLength": data.len(), "target": target}));
        views.len() - 1
    };
    for mesh in meshes {
        let mut pos = Vec::with_capacity(mesh.vertices.len() * 12);
        let (mut lo, mut hi) = ([f32::INFINITY; 3], [f32::NEG_INFINITY; 3]);
        for v in &mesh.vertices {
            for (k, c) in v.to_array().into_iter().enumerate() {
                let c = c as f32;
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
                pos.extend_from_slice(&c.to_le_bytes());
            }
        }
        let pv = push_view(&mut bin, pos, 34962);
        accessors.push(json!({"bufferView": pv, "componentType": 5126, "count": mesh.vertices.len(),
            "type": "VEC3", "min": lo, "max": hi}));
        let pos_acc = accessors.len() - 1;
        let idx: Vec<u8> = mesh.faces.iter().flatten().flat_map(|i| i.to_le_bytes()).collect();
        let iv = push_view(&mut bin, idx, 34963);
        accessors.push(json!({"bufferView": iv, "componentType": 5125, "count": mesh.faces.len() * 3, "type": "SCALAR"}));
        let idx_acc = accessors.len() - 1;
        let mut attributes = json!({"POSITION": pos_acc});
        if let Some(colors) = &mesh.surface.vertex_colors {
            let data: Vec<u8> = colors.iter().flatten().flat_map(|c| c.to_le_bytes()).collect();
            let cv = push_view(&mut bin, data, 34962);
            accessors.push(json!({"bufferView": cv, "componentType": 5126, "count": colors.len(), "type": "VEC3"}));
            attributes["COLOR_0"] = json!(accessors.len() - 1);
        }
        primitives.push(json!({"attributes": attributes, "indices": idx_acc, "mode": 4}));
    }
    while bin.len() % 4 != 0 {
        bin.push(0);
    }
    let doc = json!({
        "asset": {"version": "2.0", "generator": "meshqa"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0}],
        "meshes": [{"primitives": primitives}],
        "buffers": [{"byteLength": bin.len()}],
        "bufferViews": views,
        "accessors": accessors,
    });
    let mut json_bytes = serde_json::to_vec(&doc).expect("glTF json");
    while json_bytes.len() % 4 != 0 {
        json_bytes.push(b' ');
    }
    let total = 12 + 8 + json_bytes.len() + 8 + bin.len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&GLB_MAGIC.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.extend_from_slice(&(json_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&CHUNK_JSON.to_le_bytes());
    out.extend_from_slice(&json_bytes);
    out.extend_from_slice(&(bin.len() as u32).to_le_bytes());
    out.extend_from_slice(&CHUNK_BIN.to_le_bytes());
    out.extend_from_slice(&bin);
    out
}
