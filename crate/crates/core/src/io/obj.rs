//! Wavefront OBJ meshes (vertices and triangular faces only).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::morphable::TriangleMesh;

pub fn mesh_to_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn export_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    fs::write(path, mesh_to_obj(mesh)).map_err(|e| Error::io(path, e))
}

/// Reads `v` and `f` records; polygons are fan-triangulated and
/// `v/vt/vn` index forms accepted.
pub fn import_mesh(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::load(path, format!("line {}: {what}", lineno + 1));
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.take(3).map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad vertex"))?;
                if c.len() != 3 {
                    return Err(bad("vertex needs 3 coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        match first.parse::<i64>() {
                            Ok(i) if i > 0 => Ok(i as usize - 1),
                            Ok(i) if i < 0 && (-i) as usize <= vertices.len() => Ok(vertices.len() - (-i) as usize),
                            _ => Err(bad("bad face index")),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, triangles).map_err(|e| Error::load(path, e.to_string()))
}
