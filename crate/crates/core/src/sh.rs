//! Real spherical-harmonic color up to degree 3, in the basis ordering and
//! sign convention used by common Gaussian-splatting viewers.

use crate::math::Vec3;

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Maps a linear RGB value to the DC coefficient that reproduces it.
pub fn rgb_to_dc(rgb: &Vec3) -> Vec3 {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// Basis values for the first `count` functions at direction `d`.
pub fn sh_basis(d: &Vec3, count: usize) -> [f64; 16] {
    sh_basis_with_grad(d, count).0
}

/// Basis values and their gradients with respect to the direction.
pub fn sh_basis_with_grad(d: &Vec3, count: usize) -> ([f64; 16], [Vec3; 16]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    let mut g = [Vec3::zeros(); 16];
    b[0] = SH_C0;
    if count > 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
        g[1] = Vec3::new(0.0, -SH_C1, 0.0);
        g[2] = Vec3::new(0.0, 0.0, SH_C1);
        g[3] = Vec3::new(-SH_C1, 0.0, 0.0);
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        g[4] = SH_C2[0] * Vec3::new(y, x, 0.0);
        g[5] = SH_C2[1] * Vec3::new(0.0, z, y);
        g[6] = SH_C2[2] * Vec3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g[7] = SH_C2[3] * Vec3::new(z, 0.0, x);
        g[8] = SH_C2[4] * Vec3::new(2.0 * x, -2.0 * y, 0.0);
    }
    if count > 9 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        b[10] = SH_C3[1] * x * y * z;
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = SH_C3[5] * z * (xx - yy);
        b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        g[9] = SH_C3[0] * Vec3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
        g[10] = SH_C3[1] * Vec3::new(y * z, x * z, x * y);
        g[11] = SH_C3[2] * Vec3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
        g[12] = SH_C3[3] * Vec3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
        g[13] = SH_C3[4] * Vec3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
        g[14] = SH_C3[5] * Vec3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
        g[15] = SH_C3[6] * Vec3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
    }
    (b, g)
}

/// Unclamped SH sum `Σ bₖ(d) cₖ`.
pub fn eval_sh_raw(sh_coeffs: &[Vec3], view_direction: &Vec3) -> Vec3 {
    let b = sh_basis(view_direction, sh_coeffs.len());
    sh_coeffs.iter().zip(b.iter()).fold(Vec3::zeros(), |acc, (c, w)| acc + c * *w)
}

/// View-dependent color: `min(1, max(0, raw + 0.5))` per channel.
pub fn eval_sh_color(sh_coeffs: &[Vec3], view_direction: &Vec3) -> Vec3 {
    eval_sh_raw(sh_coeffs, view_direction).map(|v| (v + 0.5).clamp(0.0, 1.0))
}

/// Color plus the per-channel mask of channels that were not clamped.
pub(crate) fn eval_sh_color_masked(sh_coeffs: &[Vec3], view_direction: &Vec3) -> (Vec3, [bool; 3]) {
    let raw = eval_sh_raw(sh_coeffs, view_direction);
    let mut active = [false; 3];
    let mut out = Vec3::zeros();
    for ch in 0..3 {
        let v = raw[ch] + 0.5;
        active[ch] = v > 0.0 && v < 1.0;
        out[ch] = v.clamp(0.0, 1.0);
    }
    (out, active)
}

/// Given `∂L/∂color`, returns `(∂L/∂coeffs, ∂L/∂direction)`.
pub(crate) fn sh_color_backward(
    sh_coeffs: &[Vec3],
    view_direction: &Vec3,
    active: [bool; 3],
    grad_color: &Vec3,
) -> (Vec<Vec3>, Vec3) {
    let mut g = *grad_color;
    for ch in 0..3 {
        if !active[ch] {
            g[ch] = 0.0;
        }
    }
    let (b, db) = sh_basis_with_grad(view_direction, sh_coeffs.len());
    let grad_coeffs = (0..sh_coeffs.len()).map(|k| g * b[k]).collect();
    let mut grad_dir = Vec3::zeros();
    for k in 1..sh_coeffs.len() {
        grad_dir += db[k] * sh_coeffs[k].dot(&g);
    }
    (grad_coeffs, grad_dir)
}
