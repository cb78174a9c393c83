//! Procedural scenes for tests, demos and benchmarks: a blendshape
//! ellipsoid "head" with textured surface splats, seen from a camera ring.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSplat, SplatCloud};
use crate::img::Mask;
use crate::io::image::quantize;
use crate::io::model::round_to_f32;
use crate::io::scene::{write_scene, GroundTruthFiles};
use crate::math::{logit, rotation_to_quat, Mat3, Vec3};
use crate::morphable::{evaluate_surface, MorphableModel, SurfaceParams, TriangleMesh};
use crate::render::{render, Camera};
use crate::sh::rgb_to_dc;
use crate::train::TrainingView;

pub const MAX_RESOLUTION: usize = 512;
pub const HEAD_RADII: [f64; 3] = [0.78, 1.0, 0.88];

/// Unit icosphere with `subdivisions` rounds of 4-way triangle splitting.
/// Triangles are wound counter-clockwise when seen from outside.
pub fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    (vertices, triangles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub texture_seed: u64,
    pub resolution: usize,
    pub num_views: usize,
    pub ring_radius: f64,
    /// Total yaw spread of the training ring, degrees.
    pub ring_span_deg: f64,
    /// `(yaw, pitch)` in degrees of each held-out view.
    pub heldout_angles_deg: Vec<[f64; 2]>,
    pub subdivisions: usize,
    pub num_shape: usize,
    pub num_expression: usize,
    /// Standard deviation of the drawn ground-truth coefficients.
    pub coefficient_std: f64,
    pub gt_shape_coeffs: Option<Vec<f64>>,
    pub gt_expression_coeffs: Option<Vec<f64>>,
    pub splat_count: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            texture_seed: 0,
            resolution: 128,
            num_views: 5,
            ring_radius: 3.5,
            ring_span_deg: 80.0,
            heldout_angles_deg: vec![[-65.0, 0.0], [65.0, 0.0], [0.0, 30.0], [0.0, -25.0], [35.0, 20.0], [-35.0, -15.0]],
            subdivisions: 3,
            num_shape: 8,
            num_expression: 4,
            coefficient_std: 1.0,
            gt_shape_coeffs: None,
            gt_expression_coeffs: None,
            splat_count: 6000,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution > MAX_RESOLUTION {
            return Err(Error::InvalidParameter(format!("resolution must lie in 1..={MAX_RESOLUTION}")));
        }
        if self.num_views == 0 {
            return Err(Error::InvalidParameter("at least one view is required".into()));
        }
        if !(self.ring_radius > 1.5) {
            return Err(Error::InvalidParameter("ring_radius must keep cameras outside the head (> 1.5)".into()));
        }
        if self.subdivisions > 5 {
            return Err(Error::InvalidParameter("at most 5 subdivisions".into()));
        }
        for (name, given, n) in [
            ("gt_shape_coeffs", &self.gt_shape_coeffs, self.num_shape),
            ("gt_expression_coeffs", &self.gt_expression_coeffs, self.num_expression),
        ] {
            if let Some(c) = given {
                if c.len() != n {
                    return Err(Error::InvalidParameter(format!("{name} has {} entries, expected {n}", c.len())));
                }
            }
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        self.resolution as f64 * self.ring_radius / 2.5
    }

    fn camera(&self, yaw_deg: f64, pitch_deg: f64) -> Camera {
        let (y, p) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let eye = Vec3::new(p.cos() * y.sin(), p.sin(), p.cos() * y.cos()) * self.ring_radius;
        Camera::look_at(&eye, &Vec3::zeros(), &Vec3::y(), self.focal(), self.resolution, self.resolution)
    }

    pub fn training_cameras(&self) -> Vec<Camera> {
        let n = self.num_views;
        (0..n)
            .map(|k| {
                let t = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
                self.camera(-0.5 * self.ring_span_deg + t * self.ring_span_deg, 0.0)
            })
            .collect()
    }

    pub fn heldout_cameras(&self) -> Vec<Camera> {
        self.heldout_angles_deg.iter().map(|[y, p]| self.camera(*y, *p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    /// Prior for training: template plus bases, zero coefficients implied.
    pub model: MorphableModel,
    pub gt_params: SurfaceParams,
    pub gt_mesh: TriangleMesh,
    pub gt_splats: SplatCloud,
    pub views: Vec<TrainingView>,
    pub heldout: Vec<TrainingView>,
}

fn ellipsoid_normal(v: &Vec3) -> Vec3 {
    Vec3::new(v.x / (HEAD_RADII[0] * HEAD_RADII[0]), v.y / (HEAD_RADII[1] * HEAD_RADII[1]), v.z / (HEAD_RADII[2] * HEAD_RADII[2])).normalize()
}

/// Smooth normal displacement centred on unit direction `center`.
fn bump_basis(dirs: &[Vec3], normals: &[Vec3], center: &Vec3, width: f64, amplitude: f64) -> Vec<Vec3> {
    dirs.iter()
        .zip(normals)
        .map(|(d, n)| n * (amplitude * (-(d - center).norm_squared() / (2.0 * width * width)).exp()))
        .collect()
}

fn random_front_direction(rng: &mut ChaCha8Rng, min_z: f64, max_y: f64) -> Vec3 {
    loop {
        let d = Vec3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
        if d.z >= min_z && d.y <= max_y {
            return d;
        }
    }
}

/// Blendshape ellipsoid: smooth normal bumps over the front of the head as
/// shape bases, and lower-face bumps as expression bases. The face region
/// is the front hemisphere (`z > 0`).
pub fn head_model(subdivisions: usize, num_shape: usize, num_expression: usize, seed: u64) -> Result<MorphableModel> {
    let (dirs, triangles) = icosphere(subdivisions);
    let template: Vec<Vec3> = dirs.iter().map(|d| Vec3::new(d.x * HEAD_RADII[0], d.y * HEAD_RADII[1], d.z * HEAD_RADII[2])).collect();
    let normals: Vec<Vec3> = template.iter().map(ellipsoid_normal).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b1e5);
    let shape = (0..num_shape)
        .map(|_| {
            let c = random_front_direction(&mut rng, 0.0, 1.0);
            bump_basis(&dirs, &normals, &c, rng.gen_range(0.3..0.5), 0.1)
        })
        .collect();
    let expression = (0..num_expression)
        .map(|_| {
            let c = random_front_direction(&mut rng, 0.3, -0.1);
            bump_basis(&dirs, &normals, &c, rng.gen_range(0.2..0.35), 0.06)
        })
        .collect();
    let mask = dirs.iter().map(|d| d.z > 0.0).collect();
    Ok(round_to_f32(&MorphableModel::new(template, shape, expression, triangles, mask)?))
}

fn procedural_color(p: &Vec3, waves: &[(Vec3, f64, Vec3)]) -> Vec3 {
    let mut c = Vec3::new(0.72, 0.55, 0.45);
    for (freq, phase, tint) in waves {
        c += tint * (freq.dot(p) + phase).sin();
    }
    c.map(|v| v.clamp(0.05, 0.95))
}

fn tangent_frame(n: &Vec3) -> Mat3 {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    Mat3::from_columns(&[t1, t2, *n])
}

/// Flat, opaque splats sampled uniformly over `mesh`, oriented with the
/// interpolated vertex normal and coloured by a seeded procedural texture.
pub fn surface_splats(mesh: &TriangleMesh, count: usize, texture_seed: u64, sample_seed: u64) -> SplatCloud {
    let mut tex = ChaCha8Rng::seed_from_u64(texture_seed);
    let waves: Vec<(Vec3, f64, Vec3)> = (0..6)
        .map(|_| {
            let dir = Vec3::from_fn(|_, _| StandardNormal.sample(&mut tex)).normalize();
            let freq = dir * tex.gen_range(4.0..11.0);
            let tint = Vec3::from_fn(|_, _| tex.gen_range(-0.12..0.12));
            (freq, tex.gen_range(0.0..std::f64::consts::TAU), tint)
        })
        .collect();
    let vertex_normals = mesh.vertex_normals();
    let areas: Vec<f64> = (0..mesh.num_triangles()).map(|t| mesh.triangle_area(t)).collect();
    let total: f64 = areas.iter().sum();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cdf.push(acc);
    }
    let tangential = 0.8 * (total / count.max(1) as f64).sqrt();
    let log_scale = Vec3::new(tangential.ln(), tangential.ln(), (0.08 * tangential).ln());
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let splats = (0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            let t = cdf.partition_point(|&c| c < u).min(areas.len() - 1);
            let (mut a, mut b): (f64, f64) = (rng.gen(), rng.gen());
            if a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            let tri = mesh.triangles[t];
            let [p0, p1, p2] = mesh.corners(t);
            let p = p0 * (1.0 - a - b) + p1 * a + p2 * b;
            let n = (vertex_normals[tri[0]] * (1.0 - a - b) + vertex_normals[tri[1]] * a + vertex_normals[tri[2]] * b).normalize();
            let color = procedural_color(&p, &waves);
            GaussianSplat::new(p, log_scale, rotation_to_quat(&tangent_frame(&n)), logit(0.9), vec![rgb_to_dc(&color)])
        })
        .collect();
    SplatCloud::new(splats)
}

fn render_views(splats: &SplatCloud, cameras: Vec<Camera>, prefix: &str) -> Vec<TrainingView> {
    cameras
        .into_iter()
        .enumerate()
        .map(|(k, camera)| {
            let img = render(splats, &camera, &Vec3::zeros());
            let mask = Mask::from_alpha(camera.width, camera.height, &img.alpha, 0.5);
            TrainingView { name: format!("{prefix}_{k:02}"), camera, image: quantize(&img.rgb), mask }
        })
        .collect()
}

/// Builds the scene in memory; a pure function of the spec.
pub fn build_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let model = head_model(spec.subdivisions, spec.num_shape, spec.num_expression, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); spec.coefficient_std * z } as f32 as f64).collect()
    };
    let mut gt_params = SurfaceParams::zeros(&model);
    gt_params.shape_coeffs = spec.gt_shape_coeffs.clone().unwrap_or_else(|| draw(spec.num_shape));
    gt_params.expression_coeffs = spec.gt_expression_coeffs.clone().unwrap_or_else(|| draw(spec.num_expression));
    let gt_mesh = evaluate_surface(&model, &gt_params)?;
    let gt_splats = surface_splats(&gt_mesh, spec.splat_count, spec.texture_seed, spec.seed.wrapping_add(1));
    let views = render_views(&gt_splats, spec.training_cameras(), "train");
    let heldout = render_views(&gt_splats, spec.heldout_cameras(), "heldout");
    Ok(SyntheticScene { spec: spec.clone(), model, gt_params, gt_mesh, gt_splats, views, heldout })
}

/// Writes the scene under `dir` and returns the path of its manifest.
pub fn write_synthetic_scene(scene: &SyntheticScene, dir: &Path) -> Result<PathBuf> {
    let gt = GroundTruthFiles { mesh: &scene.gt_mesh, splats: &scene.gt_splats, params: &scene.gt_params };
    write_scene(dir, scene.spec.seed, &scene.model, &scene.views, &scene.heldout, Some(gt))
}

pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec, dir: &Path) -> Result<SyntheticScene> {
    let scene = build_synthetic_scene(spec)?;
    write_synthetic_scene(&scene, dir)?;
    Ok(scene)
}
