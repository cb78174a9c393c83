//! Morphable model container: a TOML manifest plus one raw little-endian
//! `f32` blob per array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::morphable::MorphableModel;

pub const MANIFEST_NAME: &str = "model.toml";
const MAX_EXACT_INDEX: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelManifest {
    num_vertices: usize,
    num_triangles: usize,
    num_shape: usize,
    num_expression: usize,
    /// Vertex indices inside the face region.
    face_region: Vec<usize>,
    arrays: BTreeMap<String, ArrayEntry>,
}

/// Rounds every stored value to `f32`, so that saving is lossless.
pub fn round_to_f32(model: &MorphableModel) -> MorphableModel {
    let r = |v: &Vec3| v.map(|x| x as f32 as f64);
    MorphableModel {
        template_vertices: model.template_vertices.iter().map(r).collect(),
        shape_basis: model.shape_basis.iter().map(|b| b.iter().map(r).collect()).collect(),
        expression_basis: model.expression_basis.iter().map(|b| b.iter().map(r).collect()).collect(),
        triangles: model.triangles.clone(),
        face_region_mask: model.face_region_mask.clone(),
    }
}

fn write_blob(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let values: Vec<f32> = values.map(|v| v as f32).collect();
    let mut bytes = vec![0u8; values.len() * 4];
    LittleEndian::write_f32_into(&values, &mut bytes);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(dir: &Path, entry: &ArrayEntry, expected: &[usize], name: &str) -> Result<Vec<f64>> {
    let path = dir.join(&entry.file);
    if entry.shape != expected {
        return Err(Error::load(dir.join(MANIFEST_NAME), format!("array {name} has shape {:?}, expected {expected:?}", entry.shape)));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n: usize = expected.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::load(&path, format!("array {name} holds {} bytes, manifest implies {}", bytes.len(), 4 * n)));
    }
    let mut values = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes, &mut values);
    Ok(values.into_iter().map(f64::from).collect())
}

pub fn save_model(dir: &Path, model: &MorphableModel) -> Result<()> {
    model.validate()?;
    if model.num_vertices() >= MAX_EXACT_INDEX {
        return Err(Error::InvalidInput("too many vertices for 32-bit float index storage".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, t) = (model.num_vertices(), model.triangles.len());
    let (s, e) = (model.num_shape(), model.num_expression());
    let flat = |vs: &[Vec3]| vs.iter().flat_map(|v| [v.x, v.y, v.z]).collect::<Vec<f64>>();
    let mut arrays = BTreeMap::new();
    let mut add = |name: &str, shape: Vec<usize>, values: Vec<f64>| -> Result<()> {
        let file = format!("{name}.f32");
        write_blob(&dir.join(&file), values.into_iter())?;
        arrays.insert(name.to_string(), ArrayEntry { file, shape });
        Ok(())
    };
    add("template", vec![n, 3], flat(&model.template_vertices))?;
    add("shape_basis", vec![s, n, 3], model.shape_basis.iter().flat_map(|b| flat(b)).collect())?;
    add("expression_basis", vec![e, n, 3], model.expression_basis.iter().flat_map(|b| flat(b)).collect())?;
    add("triangles", vec![t, 3], model.triangles.iter().flat_map(|tri| tri.map(|i| i as f64)).collect())?;
    let manifest = ModelManifest {
        num_vertices: n,
        num_triangles: t,
        num_shape: s,
        num_expression: e,
        face_region: (0..n).filter(|&i| model.face_region_mask[i]).collect(),
        arrays,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, toml::to_string(&manifest).expect("manifest serializes")).map_err(|e| Error::io(&path, e))
}

/// Loads a model directory (or its `model.toml`).
pub fn load_model(path: &Path) -> Result<MorphableModel> {
    let (dir, manifest_path) = if path.is_dir() { (path.to_path_buf(), path.join(MANIFEST_NAME)) } else { (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf()) };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: ModelManifest = toml::from_str(&text).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let entry = |name: &str| m.arrays.get(name).ok_or_else(|| Error::load(&manifest_path, format!("missing array {name}")));
    let (n, t, s, e) = (m.num_vertices, m.num_triangles, m.num_shape, m.num_expression);
    let to_vecs = |v: Vec<f64>| v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect::<Vec<Vec3>>();
    let template = to_vecs(read_blob(&dir, entry("template")?, &[n, 3], "template")?);
    let split = |v: Vec<f64>, k: usize| -> Vec<Vec<Vec3>> { (0..k).map(|i| to_vecs(v[i * n * 3..(i + 1) * n * 3].to_vec())).collect() };
    let shape = split(read_blob(&dir, entry("shape_basis")?, &[s, n, 3], "shape_basis")?, s);
    let expression = split(read_blob(&dir, entry("expression_basis")?, &[e, n, 3], "expression_basis")?, e);
    let raw_tris = read_blob(&dir, entry("triangles")?, &[t, 3], "triangles")?;
    let mut triangles = Vec::with_capacity(t);
    for (k, c) in raw_tris.chunks_exact(3).enumerate() {
        let mut tri = [0usize; 3];
        for (slot, &v) in tri.iter_mut().zip(c) {
            if v < 0.0 || v.fract() != 0.0 || v >= n as f64 {
                return Err(Error::load(&manifest_path, format!("triangle {k} has invalid index {v}")));
            }
            *slot = v as usize;
        }
        triangles.push(tri);
    }
    let mut mask = vec![false; n];
    for &i in &m.face_region {
        if i >= n {
            return Err(Error::load(&manifest_path, format!("face_region index {i} out of bounds for {n} vertices")));
        }
        mask[i] = true;
    }
    MorphableModel::new(template, shape, expression, triangles, mask).map_err(|e| Error::load(&manifest_path, e.to_string()))
}
