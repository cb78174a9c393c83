//! Closest-point queries against a triangle mesh and the point- and
//! splat-to-surface distances built on them.
//!
//! Distances here are the normal-projected form `|(x − xᵢ)·nᵢ|`, where `xᵢ`
//! is the closest point on the surface and `nᵢ` the face normal of the
//! triangle containing it. For gradients the closest triangle and the
//! barycentric coordinates of `xᵢ` are frozen, so surface gradients flow
//! through the triangle corners.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{sample_with, GaussianSplat};
use crate::math::{quat_rotation_backward, Mat3, Quat, Vec3};
use crate::morphable::{normal_backward, TriangleMesh};

pub const DEFAULT_LEAF_SIZE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.min[k] && self.max[k] >= other.max[k])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BvhNode {
    Inner { bounds: Aabb, left: usize, right: usize },
    Leaf { bounds: Aabb, start: usize, end: usize },
}

impl BvhNode {
    pub fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Inner { bounds, .. } | BvhNode::Leaf { bounds, .. } => bounds,
        }
    }
}

/// Axis-aligned bounding-box tree over the triangles of one mesh. Node 0 is
/// the root; leaves reference ranges of `triangle_order`.
#[derive(Debug, Clone, PartialEq)]
pub struct BvhIndex {
    pub nodes: Vec<BvhNode>,
    pub triangle_order: Vec<usize>,
    pub leaf_size: usize,
    num_vertices: usize,
}

pub fn build_bvh(mesh: &TriangleMesh) -> Result<BvhIndex> {
    build_bvh_with_leaf_size(mesh, DEFAULT_LEAF_SIZE)
}

pub fn build_bvh_with_leaf_size(mesh: &TriangleMesh, leaf_size: usize) -> Result<BvhIndex> {
    if mesh.triangles.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty mesh".into()));
    }
    let leaf_size = leaf_size.max(1);
    let boxes: Vec<Aabb> = (0..mesh.num_triangles())
        .map(|t| {
            let mut b = Aabb::empty();
            for c in mesh.corners(t) {
                b.grow(&c);
            }
            b
        })
        .collect();
    let centroids: Vec<Vec3> = (0..mesh.num_triangles()).map(|t| (boxes[t].min + boxes[t].max) * 0.5).collect();
    let mut index = BvhIndex {
        nodes: Vec::with_capacity(2 * mesh.num_triangles()),
        triangle_order: (0..mesh.num_triangles()).collect(),
        leaf_size,
        num_vertices: mesh.vertices.len(),
    };
    let n = index.triangle_order.len();
    build_node(&mut index, &boxes, &centroids, 0, n);
    Ok(index)
}

fn build_node(index: &mut BvhIndex, boxes: &[Aabb], centroids: &[Vec3], start: usize, end: usize) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &t in &index.triangle_order[start..end] {
        bounds = bounds.merge(&boxes[t]);
        cbounds.grow(&centroids[t]);
    }
    let slot = index.nodes.len();
    if end - start <= index.leaf_size {
        index.nodes.push(BvhNode::Leaf { bounds, start, end });
        return slot;
    }
    let extent = cbounds.max - cbounds.min;
    let axis = extent.imax();
    let mid = (start + end) / 2;
    index.triangle_order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
    });
    // Placeholder, patched once the children exist.
    index.nodes.push(BvhNode::Leaf { bounds, start, end });
    let left = build_node(index, boxes, centroids, start, mid);
    let right = build_node(index, boxes, centroids, mid, end);
    index.nodes[slot] = BvhNode::Inner { bounds, left, right };
    slot
}

impl BvhIndex {
    pub fn root(&self) -> &BvhNode {
        &self.nodes[0]
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, BvhNode::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosestPointResult {
    pub point: Vec3,
    pub normal: Vec3,
    pub triangle_index: usize,
    pub barycentric: Vec3,
    /// Euclidean distance from the query to `point`.
    pub distance: f64,
}

/// Closest point on triangle `abc` to `p`, with barycentric weights.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, Vec3) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, Vec3::new(1.0, 0.0, 0.0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, Vec3::new(0.0, 1.0, 0.0));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Vec3::new(1.0 - v, v, 0.0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, Vec3::new(0.0, 0.0, 1.0));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Vec3::new(1.0 - w, 0.0, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Vec3::new(0.0, 1.0 - w, w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Vec3::new(1.0 - v - w, v, w))
}

fn better(d2: f64, t: usize, best_d2: f64, best_t: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && t < best_t)
}

fn result_for(mesh: &TriangleMesh, x: &Vec3, t: usize, point: Vec3, bary: Vec3) -> ClosestPointResult {
    ClosestPointResult {
        point,
        normal: mesh.triangle_normals[t],
        triangle_index: t,
        barycentric: bary,
        distance: (x - point).norm(),
    }
}

/// Exact nearest surface point. Ties go to the lowest triangle index.
pub fn closest_point_on_surface(index: &BvhIndex, mesh: &TriangleMesh, x: &Vec3) -> ClosestPointResult {
    debug_assert_eq!(index.num_vertices, mesh.vertices.len());
    let mut best_d2 = f64::INFINITY;
    let mut best_t = usize::MAX;
    let mut best = (Vec3::zeros(), Vec3::zeros());
    let mut stack: Vec<usize> = Vec::with_capacity(64);
    stack.push(0);
    while let Some(node) = stack.pop() {
        match &index.nodes[node] {
            BvhNode::Leaf { bounds, start, end } => {
                if bounds.distance_squared(x) > best_d2 {
                    continue;
                }
                for &t in &index.triangle_order[*start..*end] {
                    let [a, b, c] = mesh.corners(t);
                    let (p, bary) = closest_point_on_triangle(x, &a, &b, &c);
                    let d2 = (x - p).norm_squared();
                    if better(d2, t, best_d2, best_t) {
                        best_d2 = d2;
                        best_t = t;
                        best = (p, bary);
                    }
                }
            }
            BvhNode::Inner { bounds, left, right } => {
                if bounds.distance_squared(x) > best_d2 {
                    continue;
                }
                let dl = index.nodes[*left].bounds().distance_squared(x);
                let dr = index.nodes[*right].bounds().distance_squared(x);
                // Visit the nearer child first: push it last.
                if dl <= dr {
                    stack.push(*right);
                    stack.push(*left);
                } else {
                    stack.push(*left);
                    stack.push(*right);
                }
            }
        }
    }
    result_for(mesh, x, best_t, best.0, best.1)
}

/// Linear scan over every triangle; same tie rule as the BVH query.
pub fn closest_point_brute_force(mesh: &TriangleMesh, x: &Vec3) -> ClosestPointResult {
    let mut best_d2 = f64::INFINITY;
    let mut best_t = 0;
    let mut best = (Vec3::zeros(), Vec3::zeros());
    for t in 0..mesh.num_triangles() {
        let [a, b, c] = mesh.corners(t);
        let (p, bary) = closest_point_on_triangle(x, &a, &b, &c);
        let d2 = (x - p).norm_squared();
        if better(d2, t, best_d2, best_t) {
            best_d2 = d2;
            best_t = t;
            best = (p, bary);
        }
    }
    result_for(mesh, x, best_t, best.0, best.1)
}

/// `|(x − xᵢ)·nᵢ|` for the closest surface point `xᵢ`.
pub fn point_to_surface_distance(index: &BvhIndex, mesh: &TriangleMesh, x: &Vec3) -> f64 {
    let c = closest_point_on_surface(index, mesh, x);
    (x - c.point).dot(&c.normal).abs()
}

/// Which extent of a splat the surface distance integrates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Average over reparameterized draws from the splat's Gaussian.
    #[default]
    SplatToSurface,
    /// The splat center only.
    PointToSurface,
}

/// Result of one splat-to-surface evaluation with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatDistance {
    pub mean: f64,
    pub samples: Vec<f64>,
    /// Closest triangle of each draw.
    pub triangles: Vec<usize>,
    pub grad_position: Vec3,
    pub grad_log_scale: Vec3,
    pub grad_rotation: Quat,
    /// Sparse `(vertex, ∂mean/∂vertex)` contributions, possibly repeated.
    pub vertex_grads: Vec<(usize, Vec3)>,
}

/// Monte-Carlo splat-to-surface distance: the mean of `|(xⱼ − xᵢ)·nᵢ|` over
/// draws `xⱼ = μ + R diag(exp(log_scale)) εⱼ`. Returns the mean and the raw
/// per-draw distances.
pub fn splat_to_surface_distance(
    index: &BvhIndex,
    mesh: &TriangleMesh,
    splat: &GaussianSplat,
    eps_draws: &[Vec3],
) -> Result<(f64, Vec<f64>)> {
    let d = splat_to_surface_with_grad(index, mesh, splat, eps_draws, false)?;
    Ok((d.mean, d.samples))
}

/// As [`splat_to_surface_distance`], optionally with gradients of the mean
/// with respect to the splat geometry and the surface vertices.
pub fn splat_to_surface_with_grad(
    index: &BvhIndex,
    mesh: &TriangleMesh,
    splat: &GaussianSplat,
    eps_draws: &[Vec3],
    with_grad: bool,
) -> Result<SplatDistance> {
    if eps_draws.is_empty() {
        return Err(Error::InvalidParameter("splat-to-surface distance needs at least one draw".into()));
    }
    let rot = splat.rotation_matrix();
    let scales = splat.scales();
    let inv_n = 1.0 / eps_draws.len() as f64;
    let mut out = SplatDistance {
        mean: 0.0,
        samples: Vec::with_capacity(eps_draws.len()),
        triangles: Vec::with_capacity(eps_draws.len()),
        grad_position: Vec3::zeros(),
        grad_log_scale: Vec3::zeros(),
        grad_rotation: Quat::zeros(),
        vertex_grads: Vec::new(),
    };
    let mut grad_r = Mat3::zeros();
    for eps in eps_draws {
        let x = sample_with(&splat.position, &rot, &scales, eps);
        let c = closest_point_on_surface(index, mesh, &x);
        let offset = x - c.point;
        let signed = offset.dot(&c.normal);
        out.samples.push(signed.abs());
        out.triangles.push(c.triangle_index);
        out.mean += signed.abs() * inv_n;
        if !with_grad {
            continue;
        }
        let sign = if signed > 0.0 {
            1.0
        } else if signed < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign == 0.0 {
            continue;
        }
        let w = sign * inv_n;
        // ∂/∂x = n
        let gx = c.normal * w;
        out.grad_position += gx;
        let scaled = scales.component_mul(eps);
        for i in 0..3 {
            out.grad_log_scale[i] += scaled[i] * rot.column(i).dot(&gx);
        }
        grad_r += gx * scaled.transpose();
        // ∂/∂xᵢ = −n, with xᵢ = Σ bₖ vₖ; ∂/∂n = (x − xᵢ)
        let tri = mesh.triangles[c.triangle_index];
        let corners = mesh.corners(c.triangle_index);
        let from_normal = normal_backward(&corners, &(offset * w));
        for k in 0..3 {
            let g = -c.normal * (w * c.barycentric[k]) + from_normal[k];
            out.vertex_grads.push((tri[k], g));
        }
    }
    if with_grad {
        out.grad_rotation = quat_rotation_backward(&splat.rotation, &grad_r);
    }
    Ok(out)
}
