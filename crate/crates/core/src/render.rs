//! Differentiable forward renderer for Gaussian splats.
//!
//! Splats are projected with the local perspective Jacobian, sorted globally
//! by camera depth, and composited front to back per pixel. Splats are binned
//! into 16×16 tiles purely to shorten the per-pixel candidate list; each
//! pixel still applies its own bounding-square test, so output does not
//! depend on the tiling.

use nalgebra::{Matrix2, Matrix2x3, Matrix4, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{covariance_backward, GaussianSplat, SplatCloud, SplatGrad};
use crate::img::RgbImage;
use crate::math::{Mat3, Vec3};
use crate::parallel::{map_indexed, ExecPolicy};
use crate::sh::{eval_sh_color_masked, sh_color_backward};

pub const NEAR_PLANE: f64 = 0.01;
/// Added to both diagonal entries of the screen-space covariance (px²).
pub const COV2D_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
const TILE: usize = 16;

/// Pinhole camera; `world_to_camera` maps world points into a frame with
/// +x right, +y down and +z forward. Pixel `(i, j)` is centered at `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, world_to_camera: Matrix4<f64>) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, world_to_camera };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter(format!("focal lengths must be positive: fx={} fy={}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera image size must be non-zero".into()));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("world_to_camera is not finite".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Mat3::identity()).amax();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("world_to_camera rotation is not orthonormal (error {err:e})")));
        }
        let bottom = self.world_to_camera.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::InvalidParameter("world_to_camera bottom row must be [0 0 0 1]".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3, focal: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(&right);
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { fx: focal, fy: focal, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height, world_to_camera: m }
    }

    pub fn rotation(&self) -> Mat3 {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub view_color: Vec3,
    pub opacity: f64,
}

#[derive(Debug, Clone)]
struct Projection {
    public: ProjectedSplat,
    conic: Matrix2<f64>,
    radius: f64,
    t_cam: Vec3,
    jac: Matrix2x3<f64>,
    color_active: [bool; 3],
    view_dir: Vec3,
    dir_len: f64,
}

fn project_internal(splat: &GaussianSplat, camera: &Camera) -> Option<Projection> {
    let w = camera.rotation();
    let t = w * splat.position + camera.translation();
    if !(t.z >= NEAR_PLANE) {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let mean2d = Vector2::new(fx * t.x * iz + camera.cx, fy * t.y * iz + camera.cy);
    let jac = Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz * iz, 0.0, fy * iz, -fy * t.y * iz * iz);
    let tw = jac * w;
    let sigma = splat.covariance();
    let cov2d = tw * sigma * tw.transpose() + Matrix2::identity() * COV2D_DILATION;
    let cam_center = camera.center();
    let dir_vec = splat.position - cam_center;
    let dir_len = dir_vec.norm();
    let view_dir = dir_vec / dir_len;
    let (view_color, color_active) = eval_sh_color_masked(&splat.sh_coeffs, &view_dir);
    let det = cov2d.determinant();
    let conic = if det > 0.0 && det.is_finite() {
        Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det
    } else {
        Matrix2::zeros() * f64::NAN
    };
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda = mid + (mid * mid - det).max(0.1).sqrt();
    let radius = (3.0 * lambda.sqrt()).ceil();
    Some(Projection {
        public: ProjectedSplat { mean2d, cov2d, depth: t.z, view_color, opacity: splat.opacity() },
        conic,
        radius,
        t_cam: t,
        jac,
        color_active,
        view_dir,
        dir_len,
    })
}

/// Screen-space footprint of `splat`, or `None` if it is behind the near
/// plane.
pub fn project_splat(splat: &GaussianSplat, camera: &Camera) -> Option<ProjectedSplat> {
    project_internal(splat, camera).map(|p| p.public)
}

/// Front-to-back `Σ cᵢ αᵢ Π_{j<i}(1−αⱼ)` over depth-sorted contributions.
/// Returns the accumulated color and the remaining transmittance, which the
/// caller multiplies into its background.
pub fn composite_pixel(sorted_contributions: &[(f64, Vec3)]) -> (Vec3, f64) {
    let mut color = Vec3::zeros();
    let mut t = 1.0;
    for (alpha, c) in sorted_contributions {
        let alpha = alpha.clamp(0.0, ALPHA_MAX);
        let next = t * (1.0 - alpha);
        if next < TRANSMITTANCE_MIN {
            break;
        }
        color += c * (alpha * t);
        t = next;
    }
    (color, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    /// Accumulated opacity `1 − T` per pixel.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub visible: usize,
    pub culled: usize,
    pub skipped_degenerate: usize,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct RenderState {
    projections: Vec<Option<Projection>>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    final_t: Vec<f64>,
    last_contrib: Vec<u32>,
    background: Vec3,
    pub diagnostics: RenderDiagnostics,
}

struct TileOutput {
    color: Vec<Vec3>,
    final_t: Vec<f64>,
    last: Vec<u32>,
}

#[inline]
fn splat_alpha(p: &Projection, px: f64, py: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - p.public.mean2d.x;
    let dy = py - p.public.mean2d.y;
    if dx.abs() > p.radius || dy.abs() > p.radius {
        return None;
    }
    let c = &p.conic;
    let power = -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy);
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let raw = p.public.opacity * g;
    let alpha = raw.min(ALPHA_MAX);
    if alpha < ALPHA_MIN {
        return None;
    }
    Some((alpha, g, dx, dy, raw > ALPHA_MAX))
}

fn bin_tiles(projections: &[Option<Projection>], width: usize, height: usize) -> (Vec<Vec<u32>>, usize) {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut order: Vec<usize> = (0..projections.len()).filter(|&i| projections[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = projections[a].as_ref().map_or(0.0, |p| p.public.depth);
        let db = projections[b].as_ref().map_or(0.0, |p| p.public.depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for i in order {
        let p = projections[i].as_ref().expect("filtered");
        let m = p.public.mean2d;
        let x0 = (m.x - p.radius).ceil().max(0.0);
        let x1 = (m.x + p.radius).floor().min(width as f64 - 1.0);
        let y0 = (m.y - p.radius).ceil().max(0.0);
        let y1 = (m.y + p.radius).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
        let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    (tiles, tiles_x)
}

fn tile_pixels(tile: usize, tiles_x: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let (x0, y0) = (tx * TILE, ty * TILE);
    let (x1, y1) = ((x0 + TILE).min(width), (y0 + TILE).min(height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

pub fn render(cloud: &SplatCloud, camera: &Camera, background: &Vec3) -> RenderedImage {
    render_with_state(cloud, camera, background, ExecPolicy::default()).0
}

/// Forward pass, also returning the state consumed by [`backward_from_state`].
pub fn render_with_state(cloud: &SplatCloud, camera: &Camera, background: &Vec3, exec: ExecPolicy) -> (RenderedImage, RenderState) {
    let (width, height) = (camera.width, camera.height);
    let mut diagnostics = RenderDiagnostics::default();
    let mut projections = map_indexed(exec, cloud.len(), |i| project_internal(&cloud.splats[i], camera));
    for p in projections.iter_mut() {
        match p {
            None => diagnostics.culled += 1,
            Some(proj) if !proj.conic[(0, 0)].is_finite() => {
                diagnostics.skipped_degenerate += 1;
                *p = None;
            }
            Some(_) => diagnostics.visible += 1,
        }
    }
    let (tiles, tiles_x) = bin_tiles(&projections, width, height);
    let outputs = map_indexed(exec, tiles.len(), |tile| {
        let list = &tiles[tile];
        let mut out = TileOutput { color: Vec::new(), final_t: Vec::new(), last: Vec::new() };
        for (x, y) in tile_pixels(tile, tiles_x, width, height) {
            let (px, py) = (x as f64, y as f64);
            let mut t = 1.0;
            let mut color = Vec3::zeros();
            let mut last = 0u32;
            for (k, &s) in list.iter().enumerate() {
                let p = projections[s as usize].as_ref().expect("binned splats are visible");
                let Some((alpha, ..)) = splat_alpha(p, px, py) else { continue };
                let next = t * (1.0 - alpha);
                if next < TRANSMITTANCE_MIN {
                    break;
                }
                color += p.public.view_color * (alpha * t);
                t = next;
                last = k as u32 + 1;
            }
            out.color.push(color);
            out.final_t.push(t);
            out.last.push(last);
        }
        out
    });
    let mut rgb = RgbImage::new(width, height);
    let mut alpha = vec![0.0; width * height];
    let mut final_t = vec![1.0; width * height];
    let mut last_contrib = vec![0u32; width * height];
    for (tile, out) in outputs.into_iter().enumerate() {
        for (k, (x, y)) in tile_pixels(tile, tiles_x, width, height).enumerate() {
            let i = y * width + x;
            let c = out.color[k] + background * out.final_t[k];
            rgb.set(x, y, &c);
            alpha[i] = 1.0 - out.final_t[k];
            final_t[i] = out.final_t[k];
            last_contrib[i] = out.last[k];
        }
    }
    let state = RenderState { projections, tiles, tiles_x, final_t, last_contrib, background: *background, diagnostics };
    (RenderedImage { rgb, alpha }, state)
}

#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    color: Vec3,
    opacity: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.color += o.color;
        self.opacity += o.opacity;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub splats: Vec<SplatGrad>,
    /// Norm of the loss gradient with respect to each splat's 2D mean, in
    /// normalized device units (pixels scaled by half the image size).
    pub mean2d_grad_norms: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Re-runs the forward pass and returns gradients of `Σ upstream ⊙ rgb`.
pub fn render_backward(cloud: &SplatCloud, camera: &Camera, background: &Vec3, upstream_grad: &RgbImage) -> RenderGrads {
    let (_, state) = render_with_state(cloud, camera, background, ExecPolicy::default());
    backward_from_state(cloud, camera, &state, upstream_grad, ExecPolicy::default())
}

pub fn backward_from_state(
    cloud: &SplatCloud,
    camera: &Camera,
    state: &RenderState,
    upstream_grad: &RgbImage,
    exec: ExecPolicy,
) -> RenderGrads {
    let (width, height) = (camera.width, camera.height);
    let projections = &state.projections;
    let tile_grads = map_indexed(exec, state.tiles.len(), |tile| {
        let list = &state.tiles[tile];
        let mut grads = vec![ScreenGrad::default(); list.len()];
        for (x, y) in tile_pixels(tile, state.tiles_x, width, height) {
            let i = y * width + x;
            let end = state.last_contrib[i] as usize;
            if end == 0 {
                continue;
            }
            let g = upstream_grad.get(x, y);
            if g == Vec3::zeros() {
                continue;
            }
            let (px, py) = (x as f64, y as f64);
            let mut t = state.final_t[i];
            let mut after = state.background * t;
            for k in (0..end).rev() {
                let p = projections[list[k] as usize].as_ref().expect("binned splats are visible");
                let Some((alpha, gauss, dx, dy, clamped)) = splat_alpha(p, px, py) else { continue };
                t /= 1.0 - alpha;
                let c = &p.public.view_color;
                let sg = &mut grads[k];
                sg.color += g * (alpha * t);
                let d_alpha = g.dot(&(c * t - after / (1.0 - alpha)));
                after += c * (alpha * t);
                if clamped {
                    continue;
                }
                sg.opacity += d_alpha * gauss;
                let d_power = d_alpha * alpha;
                let cn = &p.conic;
                sg.mean += Vector2::new(cn[(0, 0)] * dx + cn[(0, 1)] * dy, cn[(0, 1)] * dx + cn[(1, 1)] * dy) * d_power;
                sg.conic += Matrix2::new(dx * dx, dx * dy, dx * dy, dy * dy) * (-0.5 * d_power);
            }
        }
        grads
    });
    let mut screen = vec![ScreenGrad::default(); cloud.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            screen[state.tiles[tile][k] as usize].add(g);
        }
    }
    let half = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);
    let per_splat = map_indexed(exec, cloud.len(), |i| {
        let splat = &cloud.splats[i];
        match &projections[i] {
            Some(p) => {
                let g = &screen[i];
                (projection_backward(splat, camera, p, g), g.mean.component_mul(&half).norm(), true)
            }
            None => (SplatGrad::zeros(splat.sh_coeffs.len()), 0.0, false),
        }
    });
    let mut out = RenderGrads {
        splats: Vec::with_capacity(cloud.len()),
        mean2d_grad_norms: Vec::with_capacity(cloud.len()),
        visible: Vec::with_capacity(cloud.len()),
    };
    for (g, n, v) in per_splat {
        out.splats.push(g);
        out.mean2d_grad_norms.push(n);
        out.visible.push(v);
    }
    out
}

fn projection_backward(splat: &GaussianSplat, camera: &Camera, p: &Projection, g: &ScreenGrad) -> SplatGrad {
    let mut grad = SplatGrad::zeros(splat.sh_coeffs.len());
    let op = p.public.opacity;
    grad.opacity_logit = g.opacity * op * (1.0 - op);

    let (grad_sh, grad_dir) = sh_color_backward(&splat.sh_coeffs, &p.view_dir, p.color_active, &g.color);
    grad.sh_coeffs = grad_sh;
    let d = &p.view_dir;
    grad.position += (grad_dir - d * d.dot(&grad_dir)) / p.dir_len;

    let grad_cov = -(p.conic * g.conic * p.conic);
    let w = camera.rotation();
    let tw = p.jac * w;
    let sigma = splat.covariance();
    let grad_sigma = tw.transpose() * grad_cov * tw;
    let grad_tw = (grad_cov + grad_cov.transpose()) * tw * sigma;
    let gj = grad_tw * w.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let t = &p.t_cam;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let gm = &g.mean;
    let gt = Vec3::new(
        gj[(0, 2)] * (-fx * iz2) + gm.x * fx * iz,
        gj[(1, 2)] * (-fy * iz2) + gm.y * fy * iz,
        gj[(0, 0)] * (-fx * iz2) + gj[(0, 2)] * (2.0 * fx * t.x * iz3) + gj[(1, 1)] * (-fy * iz2)
            + gj[(1, 2)] * (2.0 * fy * t.y * iz3)
            - gm.x * fx * t.x * iz2
            - gm.y * fy * t.y * iz2,
    );
    grad.position += w.transpose() * gt;
    let (gl, gq) = covariance_backward(&splat.log_scale, &splat.rotation, &grad_sigma);
    grad.log_scale = gl;
    grad.rotation = gq;
    grad
}
