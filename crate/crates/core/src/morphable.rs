//! Linear morphable surface: template plus weighted shape and expression
//! bases, followed by a similarity pose (scale, then rotation, then
//! translation).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_identity, quat_rotation_backward, quat_to_rotation, Mat3, Quat, Vec3};

/// Triangles with twice-area below this are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub template_vertices: Vec<Vec3>,
    pub shape_basis: Vec<Vec<Vec3>>,
    pub expression_basis: Vec<Vec<Vec3>>,
    pub triangles: Vec<[usize; 3]>,
    pub face_region_mask: Vec<bool>,
}

impl MorphableModel {
    pub fn new(
        template_vertices: Vec<Vec3>,
        shape_basis: Vec<Vec<Vec3>>,
        expression_basis: Vec<Vec<Vec3>>,
        triangles: Vec<[usize; 3]>,
        face_region_mask: Vec<bool>,
    ) -> Result<Self> {
        let model = Self { template_vertices, shape_basis, expression_basis, triangles, face_region_mask };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.template_vertices.len();
        if n == 0 || self.triangles.is_empty() {
            return Err(Error::InvalidInput("morphable model has no vertices or triangles".into()));
        }
        if self.face_region_mask.len() != n {
            return Err(Error::InvalidInput(format!(
                "face region mask has {} entries for {n} vertices",
                self.face_region_mask.len()
            )));
        }
        for (name, basis) in [("shape", &self.shape_basis), ("expression", &self.expression_basis)] {
            for (k, b) in basis.iter().enumerate() {
                if b.len() != n {
                    return Err(Error::InvalidInput(format!("{name} basis {k} has {} vertices, expected {n}", b.len())));
                }
                if !b.iter().all(|v| v.iter().all(|x| x.is_finite())) {
                    return Err(Error::InvalidInput(format!("{name} basis {k} is not finite")));
                }
            }
        }
        if !self.template_vertices.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput("template vertices are not finite".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::InvalidInput(format!("triangle {t} index out of bounds: {tri:?}")));
            }
            let area = twice_area(&self.template_vertices, tri);
            if area <= DEGENERATE_AREA {
                return Err(Error::DegenerateTriangle { index: t, area });
            }
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_shape(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn num_expression(&self) -> usize {
        self.expression_basis.len()
    }

    /// Whether all three vertices of triangle `t` are in the face region.
    pub fn triangle_in_face_region(&self, t: usize) -> bool {
        self.triangles[t].iter().all(|&v| self.face_region_mask[v])
    }

    pub fn template_mesh(&self) -> Result<TriangleMesh> {
        TriangleMesh::new(self.template_vertices.clone(), self.triangles.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub shape_coeffs: Vec<f64>,
    pub expression_coeffs: Vec<f64>,
    pub pose_rotation: Quat,
    pub pose_translation: Vec3,
    pub pose_scale: f64,
}

impl SurfaceParams {
    /// Mean surface at the identity pose.
    pub fn zeros(model: &MorphableModel) -> Self {
        Self {
            shape_coeffs: vec![0.0; model.num_shape()],
            expression_coeffs: vec![0.0; model.num_expression()],
            pose_rotation: quat_identity(),
            pose_translation: Vec3::zeros(),
            pose_scale: 1.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.shape_coeffs.iter().chain(&self.expression_coeffs).all(|v| v.is_finite())
            && self.pose_rotation.iter().all(|v| v.is_finite())
            && self.pose_translation.iter().all(|v| v.is_finite())
            && self.pose_scale.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceParamsGrad {
    pub shape_coeffs: Vec<f64>,
    pub expression_coeffs: Vec<f64>,
    pub pose_rotation: Quat,
    pub pose_translation: Vec3,
    pub pose_scale: f64,
}

impl SurfaceParamsGrad {
    pub fn zeros(num_shape: usize, num_expression: usize) -> Self {
        Self {
            shape_coeffs: vec![0.0; num_shape],
            expression_coeffs: vec![0.0; num_expression],
            pose_rotation: Quat::zeros(),
            pose_translation: Vec3::zeros(),
            pose_scale: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &SurfaceParamsGrad) {
        for (a, b) in self.shape_coeffs.iter_mut().zip(&other.shape_coeffs) {
            *a += b;
        }
        for (a, b) in self.expression_coeffs.iter_mut().zip(&other.expression_coeffs) {
            *a += b;
        }
        self.pose_rotation += other.pose_rotation;
        self.pose_translation += other.pose_translation;
        self.pose_scale += other.pose_scale;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub triangle_normals: Vec<Vec3>,
}

fn twice_area(vertices: &[Vec3], tri: &[usize; 3]) -> f64 {
    let [a, b, c] = tri.map(|i| vertices[i]);
    (b - a).cross(&(c - a)).norm()
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        let mut triangle_normals = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::InvalidInput(format!("triangle {t} index out of bounds: {tri:?}")));
            }
            triangle_normals.push(face_normal(&vertices, tri, t)?);
        }
        Ok(Self { vertices, triangles, triangle_normals })
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * twice_area(&self.vertices, &self.triangles[t])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Half the bounding-box diagonal.
    pub fn bounding_radius(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        0.5 * (hi - lo).norm()
    }

    /// Mean length of the edges incident to each vertex.
    pub fn mean_incident_edge_length(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.vertices.len()];
        let mut count = vec![0usize; self.vertices.len()];
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let len = (self.vertices[a] - self.vertices[b]).norm();
                sum[a] += len;
                sum[b] += len;
                count[a] += 1;
                count[b] += 1;
            }
        }
        sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let w = self.triangle_area(t);
            for &i in tri {
                acc[i] += self.triangle_normals[t] * w;
            }
        }
        acc.into_iter().map(|n| if n.norm() > 0.0 { n.normalize() } else { n }).collect()
    }

    /// Uniform-area random points on the surface.
    pub fn sample_surface<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<Vec3> {
        let mut cdf = Vec::with_capacity(self.num_triangles());
        let mut acc = 0.0;
        for t in 0..self.num_triangles() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let target = rng.gen::<f64>() * acc;
                let t = cdf.partition_point(|&c| c < target).min(cdf.len() - 1);
                let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let [a, b, c] = self.corners(t);
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3, scale: f64) -> Result<TriangleMesh> {
        let vertices = self.vertices.iter().map(|v| scale * (rotation * v) + translation).collect();
        TriangleMesh::new(vertices, self.triangles.clone())
    }
}

fn face_normal(vertices: &[Vec3], tri: &[usize; 3], index: usize) -> Result<Vec3> {
    let [a, b, c] = tri.map(|i| vertices[i]);
    let cross = (b - a).cross(&(c - a));
    let area = cross.norm();
    if !(area > DEGENERATE_AREA) {
        return Err(Error::DegenerateTriangle { index, area: 0.5 * area });
    }
    Ok(cross / area)
}

/// Unit normal of triangle `tri_index` under counter-clockwise winding.
pub fn triangle_normal(mesh: &TriangleMesh, tri_index: usize) -> Result<Vec3> {
    let tri = mesh
        .triangles
        .get(tri_index)
        .ok_or_else(|| Error::InvalidInput(format!("triangle {tri_index} out of range")))?;
    face_normal(&mesh.vertices, tri, tri_index)
}

/// Gradient of a scalar with respect to the three corners of a triangle,
/// given its gradient with respect to the unit face normal.
pub fn normal_backward(corners: &[Vec3; 3], grad_n: &Vec3) -> [Vec3; 3] {
    let e1 = corners[1] - corners[0];
    let e2 = corners[2] - corners[0];
    let c = e1.cross(&e2);
    let len = c.norm();
    let n = c / len;
    let grad_c = (grad_n - n * n.dot(grad_n)) / len;
    let g1 = e2.cross(&grad_c);
    let g2 = grad_c.cross(&e1);
    [-(g1 + g2), g1, g2]
}

fn check_dims(model: &MorphableModel, params: &SurfaceParams) -> Result<()> {
    if params.shape_coeffs.len() != model.num_shape() || params.expression_coeffs.len() != model.num_expression() {
        return Err(Error::InvalidParameter(format!(
            "coefficient counts ({}, {}) do not match model bases ({}, {})",
            params.shape_coeffs.len(),
            params.expression_coeffs.len(),
            model.num_shape(),
            model.num_expression()
        )));
    }
    if !(params.pose_scale > 0.0) || !params.is_finite() {
        return Err(Error::InvalidParameter("surface pose must be finite with positive scale".into()));
    }
    Ok(())
}

/// Blended vertices before the pose is applied.
pub fn blend_shapes(model: &MorphableModel, params: &SurfaceParams) -> Vec<Vec3> {
    let mut out = model.template_vertices.clone();
    for (basis, &c) in model.shape_basis.iter().zip(&params.shape_coeffs).chain(model.expression_basis.iter().zip(&params.expression_coeffs)) {
        if c == 0.0 {
            continue;
        }
        for (v, b) in out.iter_mut().zip(basis) {
            *v += b * c;
        }
    }
    out
}

pub fn evaluate_surface(model: &MorphableModel, params: &SurfaceParams) -> Result<TriangleMesh> {
    check_dims(model, params)?;
    let r = quat_to_rotation(&params.pose_rotation);
    let vertices = blend_shapes(model, params)
        .into_iter()
        .map(|w| params.pose_scale * (r * w) + params.pose_translation)
        .collect();
    TriangleMesh::new(vertices, model.triangles.clone())
}

/// Pulls per-vertex gradients of the evaluated mesh back to the surface
/// parameters.
pub fn surface_backward(model: &MorphableModel, params: &SurfaceParams, vertex_grads: &[Vec3]) -> SurfaceParamsGrad {
    let r = quat_to_rotation(&params.pose_rotation);
    let blended = blend_shapes(model, params);
    let mut grad = SurfaceParamsGrad::zeros(model.num_shape(), model.num_expression());
    let mut grad_r = Mat3::zeros();
    let mut local = Vec::with_capacity(vertex_grads.len());
    for (g, w) in vertex_grads.iter().zip(&blended) {
        grad.pose_translation += g;
        let rw = r * w;
        grad.pose_scale += g.dot(&rw);
        grad_r += params.pose_scale * g * w.transpose();
        local.push(params.pose_scale * (r.transpose() * g));
    }
    grad.pose_rotation = quat_rotation_backward(&params.pose_rotation, &grad_r);
    for (k, basis) in model.shape_basis.iter().enumerate() {
        grad.shape_coeffs[k] = basis.iter().zip(&local).map(|(b, l)| b.dot(l)).sum();
    }
    for (k, basis) in model.expression_basis.iter().enumerate() {
        grad.expression_coeffs[k] = basis.iter().zip(&local).map(|(b, l)| b.dot(l)).sum();
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationWeights {
    pub shape: f64,
    pub expression: f64,
}

impl Default for RegularizationWeights {
    fn default() -> Self {
        Self { shape: 1.0, expression: 1.0 }
    }
}

/// `w_s‖β‖² + w_e‖ψ‖²`; the pose is not penalized.
pub fn regularization_energy(params: &SurfaceParams, weights: &RegularizationWeights) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    weights.shape * sq(&params.shape_coeffs) + weights.expression * sq(&params.expression_coeffs)
}

pub fn regularization_grad(params: &SurfaceParams, weights: &RegularizationWeights) -> SurfaceParamsGrad {
    let mut g = SurfaceParamsGrad::zeros(params.shape_coeffs.len(), params.expression_coeffs.len());
    for (o, c) in g.shape_coeffs.iter_mut().zip(&params.shape_coeffs) {
        *o = 2.0 * weights.shape * c;
    }
    for (o, c) in g.expression_coeffs.iter_mut().zip(&params.expression_coeffs) {
        *o = 2.0 * weights.expression * c;
    }
    g
}
