//! Image losses, the face-region surface loss and the weighted total.

use serde::{Deserialize, Serialize};

use crate::distance::{closest_point_on_surface, splat_to_surface_with_grad, BvhIndex};
use crate::error::{Error, Result};
use crate::gaussian::SplatCloud;
use crate::img::{Mask, RgbImage};
use crate::math::{Quat, Vec3};
use crate::morphable::{MorphableModel, TriangleMesh};
use crate::parallel::{map_indexed, ExecPolicy};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    /// Share of `1 − SSIM` inside the image loss; the rest is L1.
    pub lambda_ssim: f64,
    pub lambda_s2s: f64,
    pub lambda_reg_initial: f64,
    pub lambda_reg_final: f64,
    pub lambda_reg_decay_end: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            lambda_ssim: 0.2,
            lambda_s2s: 0.1,
            lambda_reg_initial: 1e-2,
            lambda_reg_final: 1e-4,
            lambda_reg_decay_end: 1000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rgb, self.lambda_ssim, self.lambda_s2s, self.lambda_reg_initial, self.lambda_reg_final];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::InvalidParameter("lambda_ssim must lie in [0, 1]".into()));
        }
        if self.lambda_reg_decay_end < 1 {
            return Err(Error::InvalidParameter("lambda_reg_decay_end must be at least 1".into()));
        }
        Ok(())
    }

    /// Regularization weight at `iteration`: log-linear from initial to final
    /// over `[0, decay_end]`, then constant. Falls back to linear
    /// interpolation when either endpoint is zero.
    pub fn lambda_reg(&self, iteration: usize) -> f64 {
        let (a, b) = (self.lambda_reg_initial, self.lambda_reg_final);
        if iteration >= self.lambda_reg_decay_end {
            return b;
        }
        if iteration == 0 {
            return a;
        }
        let t = iteration as f64 / self.lambda_reg_decay_end as f64;
        if a > 0.0 && b > 0.0 {
            (a.ln() + (b.ln() - a.ln()) * t).exp()
        } else {
            a + (b - a) * t
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub s2s: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub s2s: f64,
    pub reg: f64,
    pub lambda_reg: f64,
    pub total: f64,
    /// Raw per-draw distances of each splat; empty outside the face region.
    pub s2s_samples: Vec<Vec<f64>>,
}

pub fn total_loss(terms: &LossTerms, s2s_samples: Vec<Vec<f64>>, weights: &LossWeights, iteration: usize) -> LossBreakdown {
    let lambda_reg = weights.lambda_reg(iteration);
    LossBreakdown {
        rgb: terms.rgb,
        s2s: terms.s2s,
        reg: terms.reg,
        lambda_reg,
        total: weights.lambda_rgb * terms.rgb + weights.lambda_s2s * terms.s2s + lambda_reg * terms.reg,
        s2s_samples,
    }
}

fn check_shapes(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if !a.same_shape(b) || a.data.len() != b.data.len() {
        return Err(Error::InvalidInput(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn l1(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images; identical images give
/// `f64::INFINITY`.
pub fn psnr(rendered: &RgbImage, target: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(rendered, target)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Same-size separable Gaussian filter with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (i, kv) in k.iter().enumerate() {
            let yy = y as isize + i as isize - r;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src = &tmp[yy as usize * w..(yy as usize + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Mean SSIM over pixels and channels, plus its gradient with respect to
/// the first image when requested.
fn ssim_impl(x: &RgbImage, y: &RgbImage, want_grad: bool, exec: ExecPolicy) -> Result<(f64, Option<RgbImage>)> {
    check_shapes(x, y)?;
    let (w, h) = (x.width, x.height);
    let n = w * h;
    if n == 0 {
        return Err(Error::InvalidInput("SSIM of an empty image".into()));
    }
    let k = gaussian_kernel();
    let per_channel = map_indexed(exec, 3, |ch| {
        let xs = x.channel(ch);
        let ys = y.channel(ch);
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mx = blur(&xs, w, h, &k);
        let my = blur(&ys, w, h, &k);
        let sxx = blur(&xx, w, h, &k);
        let syy = blur(&yy, w, h, &k);
        let sxy = blur(&xy, w, h, &k);
        let mut total = 0.0;
        let mut da = vec![0.0; if want_grad { n } else { 0 }];
        let mut db = da.clone();
        let mut dc = da.clone();
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let vx = sxx[p] - ux * ux;
            let vy = syy[p] - uy * uy;
            let cxy = sxy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let a = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                let b = -s / d2;
                let c = 2.0 * n1 / (d1 * d2);
                da[p] = a - 2.0 * ux * b - uy * c;
                db[p] = b;
                dc[p] = c;
            }
        }
        let grad = want_grad.then(|| {
            let ga = blur(&da, w, h, &k);
            let gb = blur(&db, w, h, &k);
            let gc = blur(&dc, w, h, &k);
            (0..n).map(|p| ga[p] + 2.0 * xs[p] * gb[p] + ys[p] * gc[p]).collect::<Vec<f64>>()
        });
        (total, grad)
    });
    let count = (3 * n) as f64;
    let value = per_channel.iter().map(|(t, _)| t).sum::<f64>() / count;
    let grad = want_grad.then(|| {
        let mut g = RgbImage::new(w, h);
        for (ch, (_, gc)) in per_channel.iter().enumerate() {
            let gc = gc.as_ref().expect("gradient requested");
            for p in 0..n {
                g.data[3 * p + ch] = gc[p] / count;
            }
        }
        g
    });
    Ok((value, grad))
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// zero-padded at the borders and averaged over pixels and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(ssim_impl(a, b, false, ExecPolicy::default())?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &RgbImage, b: &RgbImage) -> Result<(f64, RgbImage)> {
    let (v, g) = ssim_impl(a, b, true, ExecPolicy::default())?;
    Ok((v, g.expect("gradient requested")))
}

/// `(1 − λ_ssim)·L1 + λ_ssim·(1 − SSIM)` between the composited render and
/// the target with pixels outside `mask` replaced by `background`.
pub fn rgb_loss(rendered: &RgbImage, target: &RgbImage, mask: &Mask, background: &Vec3, lambda_ssim: f64) -> Result<f64> {
    check_shapes(rendered, target)?;
    let t = target.masked(mask, background)?;
    let mut v = (1.0 - lambda_ssim) * l1(rendered, &t)?;
    if lambda_ssim > 0.0 {
        v += lambda_ssim * (1.0 - ssim(rendered, &t)?);
    }
    Ok(v)
}

/// [`rgb_loss`] and its gradient with respect to the rendered image.
pub fn rgb_loss_with_grad(
    rendered: &RgbImage,
    target: &RgbImage,
    mask: &Mask,
    background: &Vec3,
    lambda_ssim: f64,
    exec: ExecPolicy,
) -> Result<(f64, RgbImage)> {
    check_shapes(rendered, target)?;
    let t = target.masked(mask, background)?;
    let count = rendered.data.len() as f64;
    let mut value = 0.0;
    let mut grad = RgbImage::new(rendered.width, rendered.height);
    let w1 = 1.0 - lambda_ssim;
    for ((g, r), y) in grad.data.iter_mut().zip(&rendered.data).zip(&t.data) {
        let d = r - y;
        value += d.abs();
        *g = w1 * d.signum() * (d != 0.0) as u8 as f64 / count;
    }
    value *= w1 / count;
    if lambda_ssim > 0.0 {
        let (s, gs) = ssim_impl(rendered, &t, true, exec)?;
        value += lambda_ssim * (1.0 - s);
        for (g, d) in grad.data.iter_mut().zip(&gs.expect("gradient requested").data) {
            *g -= lambda_ssim * d;
        }
    }
    Ok((value, grad))
}

/// Whether each splat counts as face region: its center's closest triangle
/// has all three vertices inside the model's face mask.
pub fn face_region_membership(cloud: &SplatCloud, mesh: &TriangleMesh, index: &BvhIndex, model: &MorphableModel, exec: ExecPolicy) -> Vec<bool> {
    map_indexed(exec, cloud.len(), |i| {
        let c = closest_point_on_surface(index, mesh, &cloud.splats[i].position);
        model.triangle_in_face_region(c.triangle_index)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryGrad {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2sOutput {
    pub value: f64,
    pub in_face: Vec<bool>,
    /// Per-draw distances; empty for splats outside the face region.
    pub samples: Vec<Vec<f64>>,
    /// Gradient of `value` per splat, zero outside the face region.
    pub splat_grads: Vec<GeometryGrad>,
    /// Gradient of `value` per mesh vertex.
    pub vertex_grads: Vec<Vec3>,
}

/// Mean splat-to-surface distance over face-region splats. `draws[i]` are
/// the standard-normal draws of splat `i`; a single zero draw reduces to the
/// center point distance.
pub fn s2s_loss(
    cloud: &SplatCloud,
    mesh: &TriangleMesh,
    index: &BvhIndex,
    model: &MorphableModel,
    draws: &[Vec<Vec3>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let out = s2s_loss_with_grad(cloud, mesh, index, model, draws, false, ExecPolicy::default())?;
    Ok((out.value, out.samples))
}

pub fn s2s_loss_with_grad(
    cloud: &SplatCloud,
    mesh: &TriangleMesh,
    index: &BvhIndex,
    model: &MorphableModel,
    draws: &[Vec<Vec3>],
    with_grad: bool,
    exec: ExecPolicy,
) -> Result<S2sOutput> {
    if draws.len() != cloud.len() {
        return Err(Error::InvalidInput(format!("{} draw sets for {} splats", draws.len(), cloud.len())));
    }
    if mesh.triangles.len() != model.triangles.len() {
        return Err(Error::InvalidInput("mesh topology does not match the morphable model".into()));
    }
    let in_face = face_region_membership(cloud, mesh, index, model, exec);
    let per_splat = map_indexed(exec, cloud.len(), |i| {
        if !in_face[i] {
            return Ok(None);
        }
        splat_to_surface_with_grad(index, mesh, &cloud.splats[i], &draws[i], with_grad).map(Some)
    });
    let n_face = in_face.iter().filter(|&&f| f).count();
    let inv = if n_face > 0 { 1.0 / n_face as f64 } else { 0.0 };
    let mut out = S2sOutput {
        value: 0.0,
        in_face,
        samples: Vec::with_capacity(cloud.len()),
        splat_grads: Vec::with_capacity(cloud.len()),
        vertex_grads: vec![Vec3::zeros(); mesh.vertices.len()],
    };
    for d in per_splat {
        match d? {
            Some(d) => {
                out.value += d.mean * inv;
                out.splat_grads.push(GeometryGrad {
                    position: d.grad_position * inv,
                    log_scale: d.grad_log_scale * inv,
                    rotation: d.grad_rotation * inv,
                });
                for (v, g) in &d.vertex_grads {
                    out.vertex_grads[*v] += g * inv;
                }
                out.samples.push(d.samples);
            }
            None => {
                out.splat_grads.push(GeometryGrad { position: Vec3::zeros(), log_scale: Vec3::zeros(), rotation: Quat::zeros() });
                out.samples.push(Vec::new());
            }
        }
    }
    Ok(out)
}
