//! Geometric and photometric evaluation.

use std::fmt::Write as _;

use kiddo::{KdTree, SquaredEuclidean};
use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distance::{build_bvh, closest_point_on_surface, BvhIndex};
use crate::error::{Error, Result};
use crate::img::{Mask, RgbImage};
use crate::loss::{l1, psnr, ssim};
use crate::math::{quat_from_axis_angle, quat_to_rotation, rotation_to_quat, Mat3, Quat, Vec3};
use crate::morphable::TriangleMesh;
use crate::parallel::{map_indexed, ExecPolicy};

/// What a source point is matched to in each ICP iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correspondence {
    /// Nearest target vertex (classic point-to-point).
    Vertex,
    /// Closest point on the target's triangles, point-to-point objective.
    Surface,
    /// Closest point on the target's triangles, minimizing the distance
    /// along the target normal with a linearized rotation step.
    #[default]
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpOptions {
    pub correspondence: Correspondence,
    pub max_iterations: usize,
    /// Stop once the RMS changes by less than this between iterations.
    pub tolerance: f64,
    pub estimate_scale: bool,
    /// Start from the translation that matches the source centroid to the
    /// area-weighted centroid of the target.
    pub centroid_init: bool,
    /// Drop correspondences above this distance percentile (1 keeps all).
    pub reject_percentile: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            correspondence: Correspondence::Plane,
            max_iterations: 50, tolerance: 1e-6, estimate_scale: false, centroid_init: true, reject_percentile: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub rotation: Quat,
    pub translation: Vec3,
    pub scale: f64,
    /// RMS point-to-mesh distance after initialization and after each
    /// iteration.
    pub rms_history: Vec<f64>,
    pub converged: bool,
}

impl AlignmentResult {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (quat_to_rotation(&self.rotation) * p) + self.translation
    }

    pub fn final_rms(&self) -> f64 {
        self.rms_history.last().copied().unwrap_or(0.0)
    }
}

/// Least-squares similarity (or rigid) transform taking `src` onto `dst`:
/// `dst ≈ s R src + t`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], estimate_scale: bool) -> Result<(Mat3, Vec3, f64)> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::AlignmentFailure(format!("need at least 3 matched points, got {} and {}", src.len(), dst.len())));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut src_cov = Mat3::zeros();
    let mut var = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose();
        src_cov += a * a.transpose();
        var += a.norm_squared();
    }
    cov /= n;
    var /= n;
    let sv = src_cov.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::AlignmentFailure("source points are collinear or coincident".into()));
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Mat3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let scale = if estimate_scale { (Mat3::from_diagonal(&svd.singular_values) * d).trace() / var } else { 1.0 };
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::AlignmentFailure(format!("degenerate scale {scale}")));
    }
    let t = md - scale * (r * ms);
    Ok((r, t, scale))
}

fn area_centroid(mesh: &TriangleMesh) -> Vec3 {
    let mut acc = Vec3::zeros();
    let mut area = 0.0;
    for t in 0..mesh.num_triangles() {
        let [a, b, c] = mesh.corners(t);
        let w = mesh.triangle_area(t);
        acc += (a + b + c) * (w / 3.0);
        area += w;
    }
    acc / area
}

/// ICP aligning `source` onto `target`. The RMS history is over the
/// correspondence distances; the iteration stops rather than let it grow.
pub fn icp_align(source: &[Vec3], target: &TriangleMesh, index: &BvhIndex, options: &IcpOptions) -> Result<AlignmentResult> {
    if source.len() < 3 {
        return Err(Error::AlignmentFailure(format!("need at least 3 source points, got {}", source.len())));
    }
    let mut r = Mat3::identity();
    let mut t = Vec3::zeros();
    let mut s = 1.0;
    if options.centroid_init {
        let c = source.iter().sum::<Vec3>() / source.len() as f64;
        t = area_centroid(target) - c;
    }
    let exec = ExecPolicy::default();
    let mut tree: KdTree<f64, 3> = KdTree::new();
    if options.correspondence == Correspondence::Vertex {
        for (i, v) in target.vertices.iter().enumerate() {
            tree.add(&[v.x, v.y, v.z], i as u64);
        }
    }
    let correspond = |r: &Mat3, t: &Vec3, s: f64| -> Matches {
        let moved: Vec<Vec3> = source.iter().map(|p| s * (r * p) + t).collect();
        let (matched, normals): (Vec<Vec3>, Vec<Vec3>) = match options.correspondence {
            Correspondence::Surface | Correspondence::Plane => map_indexed(exec, moved.len(), |i| {
                let c = closest_point_on_surface(index, target, &moved[i]);
                (c.point, c.normal)
            })
            .into_iter()
            .unzip(),
            Correspondence::Vertex => moved
                .iter()
                .map(|p| (target.vertices[tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).item as usize], Vec3::zeros()))
                .unzip(),
        };
        let d2: Vec<f64> = moved.iter().zip(&matched).map(|(p, q)| (p - q).norm_squared()).collect();
        let rms = (d2.iter().sum::<f64>() / d2.len() as f64).sqrt();
        let cutoff = if options.reject_percentile < 1.0 {
            let mut sorted = d2.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[nearest_rank(sorted.len(), options.reject_percentile)]
        } else {
            f64::INFINITY
        };
        let keep: Vec<usize> = (0..d2.len()).filter(|&i| d2[i] <= cutoff).collect();
        Matches {
            src: keep.iter().map(|&i| source[i]).collect(),
            moved: keep.iter().map(|&i| moved[i]).collect(),
            dst: keep.iter().map(|&i| matched[i]).collect(),
            normals: keep.iter().map(|&i| normals[i]).collect(),
            rms,
        }
    };
    let mut m = correspond(&r, &t, s);
    let mut history = vec![m.rms];
    let mut converged = false;
    for _ in 0..options.max_iterations {
        let (nr, nt, ns) = match options.correspondence {
            Correspondence::Plane => {
                let (dr, dt, ds) = plane_step(&m.moved, &m.dst, &m.normals, options.estimate_scale)?;
                (dr * r, ds * (dr * t) + dt, ds * s)
            }
            _ => umeyama(&m.src, &m.dst, options.estimate_scale)?,
        };
        let next = correspond(&nr, &nt, ns);
        let prev = *history.last().expect("non-empty");
        if next.rms > prev {
            converged = (next.rms - prev).abs() < options.tolerance;
            break;
        }
        r = nr;
        t = nt;
        s = ns;
        history.push(next.rms);
        m = next;
        if (prev - m.rms).abs() < options.tolerance {
            converged = true;
            break;
        }
    }
    Ok(AlignmentResult { rotation: rotation_to_quat(&r), translation: t, scale: s, rms_history: history, converged })
}

struct Matches {
    src: Vec<Vec3>,
    moved: Vec<Vec3>,
    dst: Vec<Vec3>,
    normals: Vec<Vec3>,
    rms: f64,
}

/// One Gauss-Newton step of `Σ ((p + ω×p + δ p + t − q)·n)²`, returned as
/// the incremental similarity `p ↦ (1 + δ) R(ω) p + t`.
fn plane_step(moved: &[Vec3], dst: &[Vec3], normals: &[Vec3], estimate_scale: bool) -> Result<(Mat3, Vec3, f64)> {
    let dim = if estimate_scale { 7 } else { 6 };
    let mut ata = DMatrix::<f64>::zeros(dim, dim);
    let mut atb = DVector::<f64>::zeros(dim);
    for ((p, q), n) in moved.iter().zip(dst).zip(normals) {
        let c = p.cross(n);
        let mut row = vec![c.x, c.y, c.z, n.x, n.y, n.z];
        if estimate_scale {
            row.push(p.dot(n));
        }
        let row = DVector::from_vec(row);
        let residual = (p - q).dot(n);
        ata += &row * row.transpose();
        atb -= &row * residual;
    }
    let x = ata
        .cholesky()
        .ok_or_else(|| Error::AlignmentFailure("point-to-plane system is singular (degenerate geometry)".into()))?
        .solve(&atb);
    let omega = Vec3::new(x[0], x[1], x[2]);
    let angle = omega.norm();
    let rot = if angle > 0.0 { quat_to_rotation(&quat_from_axis_angle(omega, angle)) } else { Mat3::identity() };
    let ds = if estimate_scale { 1.0 + x[6] } else { 1.0 };
    Ok((rot, Vec3::new(x[3], x[4], x[5]), ds))
}

fn nearest_rank(n: usize, p: f64) -> usize {
    let rank = p * n as f64;
    ((rank - 1e-9 * rank.max(1.0)).ceil() as usize).clamp(1, n) - 1
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    sorted[nearest_rank(sorted.len(), p)]
}

/// Point-to-mesh error statistics. `mean` is the mean distance, reported in
/// the literature's "MSE" column; `mean_squared` is the mean squared
/// distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub mean_squared: f64,
    pub median: f64,
    pub m90: f64,
    pub max: f64,
    #[serde(skip)]
    pub distances: Vec<f64>,
}

impl DistanceStats {
    pub fn from_distances(distances: Vec<f64>) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::InvalidInput("no distances to summarize".into()));
        }
        let n = distances.len() as f64;
        let mut sorted = distances.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean: distances.iter().sum::<f64>() / n,
            mean_squared: distances.iter().map(|d| d * d).sum::<f64>() / n,
            median: percentile_sorted(&sorted, 0.5),
            m90: percentile_sorted(&sorted, 0.9),
            max: *sorted.last().expect("non-empty"),
            distances,
        })
    }

    /// Same statistics in different units, e.g. millimetres per world unit.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mean: self.mean * factor,
            mean_squared: self.mean_squared * factor * factor,
            median: self.median * factor,
            m90: self.m90 * factor,
            max: self.max * factor,
            distances: self.distances.iter().map(|d| d * factor).collect(),
        }
    }
}

/// Euclidean distance from each ground-truth sample to the closest triangle
/// of `predicted`.
pub fn mesh_distance_stats(gt_samples: &[Vec3], predicted: &TriangleMesh, index: &BvhIndex) -> Result<DistanceStats> {
    if gt_samples.is_empty() || predicted.triangles.is_empty() {
        return Err(Error::InvalidInput("mesh distance needs samples and a non-empty mesh".into()));
    }
    let d = map_indexed(ExecPolicy::default(), gt_samples.len(), |i| closest_point_on_surface(index, predicted, &gt_samples[i]).distance);
    DistanceStats::from_distances(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshEvaluation {
    pub alignment: AlignmentResult,
    pub stats: DistanceStats,
}

/// Aligns `predicted` onto `ground_truth` with ICP, then measures the
/// distance from `num_samples` seeded surface samples of the ground truth
/// to the aligned prediction.
pub fn evaluate_mesh(
    predicted: &TriangleMesh,
    ground_truth: &TriangleMesh,
    num_samples: usize,
    seed: u64,
    options: &IcpOptions,
) -> Result<MeshEvaluation> {
    let gt_index = build_bvh(ground_truth)?;
    let alignment = icp_align(&predicted.vertices, ground_truth, &gt_index, options)?;
    let aligned = TriangleMesh::new(predicted.vertices.iter().map(|p| alignment.apply(p)).collect(), predicted.triangles.clone())?;
    let index = build_bvh(&aligned)?;
    let samples = ground_truth.sample_surface(num_samples, &mut ChaCha8Rng::seed_from_u64(seed));
    let stats = mesh_distance_stats(&samples, &aligned, &index)?;
    Ok(MeshEvaluation { alignment, stats })
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!("invalid psnr {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub l1: f64,
    pub ssim: f64,
    /// Infinite for identical images; written as `"inf"`.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub views: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
}

impl ImageReport {
    pub fn to_table(&self) -> String {
        let width = self.views.iter().map(|v| v.name.len()).chain([4]).max().unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "view", "L1", "SSIM", "PSNR");
        for row in self.views.iter().chain(std::iter::once(&self.mean)) {
            let psnr = if row.psnr.is_finite() { format!("{:.3}", row.psnr) } else { "inf".to_string() };
            let _ = writeln!(out, "{:<width$}  {:>8.5}  {:>8.5}  {:>8}", row.name, row.l1, row.ssim, psnr);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-view L1, SSIM and PSNR plus their means. Pixels outside each mask
/// are set to black in both images first.
pub fn image_metrics_report(names: &[String], rendered: &[RgbImage], targets: &[RgbImage], masks: &[Mask]) -> Result<ImageReport> {
    if rendered.len() != targets.len() || rendered.len() != masks.len() || rendered.len() != names.len() {
        return Err(Error::InvalidInput(format!(
            "mismatched sets: {} names, {} rendered, {} targets, {} masks",
            names.len(),
            rendered.len(),
            targets.len(),
            masks.len()
        )));
    }
    if rendered.is_empty() {
        return Err(Error::InvalidInput("no views to evaluate".into()));
    }
    let black = Vec3::zeros();
    let mut views = Vec::with_capacity(rendered.len());
    for i in 0..rendered.len() {
        let r = rendered[i].masked(&masks[i], &black)?;
        let t = targets[i].masked(&masks[i], &black)?;
        views.push(ImageMetrics { name: names[i].clone(), l1: l1(&r, &t)?, ssim: ssim(&r, &t)?, psnr: psnr(&r, &t)? });
    }
    let n = views.len() as f64;
    let mean = ImageMetrics {
        name: "mean".into(),
        l1: views.iter().map(|v| v.l1).sum::<f64>() / n,
        ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
    };
    Ok(ImageReport { views, mean })
}
