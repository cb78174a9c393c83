//! Anisotropic 3D Gaussian splats: covariance factorization, unnormalized
//! density, reparameterized sampling, and their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_rotation_backward, quat_to_rotation, sigmoid, Mat3, Quat, Vec3};

/// Smallest admissible axis scale, in world units.
pub const SCALE_FLOOR: f64 = 1e-8;
pub const MAX_SH_DEGREE: usize = 3;

pub fn num_sh_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSplat {
    pub position: Vec3,
    /// Natural log of the three axis scales.
    pub log_scale: Vec3,
    /// `(w, x, y, z)`, unit length between optimizer steps.
    pub rotation: Quat,
    pub opacity_logit: f64,
    /// One RGB triple per SH basis function.
    pub sh_coeffs: Vec<Vec3>,
}

impl GaussianSplat {
    pub fn new(position: Vec3, log_scale: Vec3, rotation: Quat, opacity_logit: f64, sh_coeffs: Vec<Vec3>) -> Self {
        Self { position, log_scale, rotation, opacity_logit, sh_coeffs }
    }

    /// Isotropic splat with identity rotation and a single constant SH term.
    pub fn isotropic(position: Vec3, sigma: f64, opacity: f64) -> Self {
        Self {
            position,
            log_scale: Vec3::repeat(sigma.ln()),
            rotation: crate::math::quat_identity(),
            opacity_logit: crate::math::logit(opacity),
            sh_coeffs: vec![Vec3::zeros()],
        }
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn max_scale(&self) -> f64 {
        self.scales().max()
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_rotation(&self.rotation)
    }

    pub fn sh_degree(&self) -> usize {
        match self.sh_coeffs.len() {
            1 => 0,
            4 => 1,
            9 => 2,
            _ => 3,
        }
    }

    pub fn covariance(&self) -> Mat3 {
        let m = self.rotation_matrix() * Mat3::from_diagonal(&self.scales());
        m * m.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh_coeffs.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Gradient with respect to every parameter of one splat. The rotation
/// entry is with respect to the stored (unnormalized) quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrad {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub sh_coeffs: Vec<Vec3>,
}

impl SplatGrad {
    pub fn zeros(num_sh: usize) -> Self {
        Self {
            position: Vec3::zeros(),
            log_scale: Vec3::zeros(),
            rotation: Quat::zeros(),
            opacity_logit: 0.0,
            sh_coeffs: vec![Vec3::zeros(); num_sh],
        }
    }

    pub fn add_assign(&mut self, other: &SplatGrad) {
        self.position += other.position;
        self.log_scale += other.log_scale;
        self.rotation += other.rotation;
        self.opacity_logit += other.opacity_logit;
        for (a, b) in self.sh_coeffs.iter_mut().zip(&other.sh_coeffs) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.position *= s;
        self.log_scale *= s;
        self.rotation *= s;
        self.opacity_logit *= s;
        for c in &mut self.sh_coeffs {
            *c *= s;
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.position.norm_squared()
            + self.log_scale.norm_squared()
            + self.rotation.norm_squared()
            + self.opacity_logit * self.opacity_logit
            + self.sh_coeffs.iter().map(|c| c.norm_squared()).sum::<f64>()
    }
}

/// Ordered splats plus a per-splat count of densification events.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplatCloud {
    pub splats: Vec<GaussianSplat>,
    pub generations: Vec<u32>,
}

impl SplatCloud {
    pub fn new(splats: Vec<GaussianSplat>) -> Self {
        let generations = vec![0; splats.len()];
        Self { splats, generations }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.splats.first().map_or(0, GaussianSplat::sh_degree)
    }

    pub fn is_finite(&self) -> bool {
        self.splats.iter().all(GaussianSplat::is_finite)
    }

    pub fn renormalize_rotations(&mut self) {
        for s in &mut self.splats {
            let n = s.rotation.norm();
            if n > 0.0 {
                s.rotation /= n;
            } else {
                s.rotation = crate::math::quat_identity();
            }
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("non-finite {what}")))
    }
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance_from_scale_rotation(log_scale: &Vec3, rotation: &Quat) -> Result<Mat3> {
    check_finite(log_scale.as_slice(), "log_scale")?;
    check_finite(rotation.as_slice(), "rotation")?;
    if (rotation.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!(
            "rotation quaternion norm {} is not unit",
            rotation.norm()
        )));
    }
    let m = quat_to_rotation(rotation) * Mat3::from_diagonal(&log_scale.map(f64::exp));
    Ok(m * m.transpose())
}

/// Pulls a gradient on `Σ` (full-matrix convention) back to log-scales and
/// the rotation quaternion.
pub fn covariance_backward(log_scale: &Vec3, rotation: &Quat, grad_sigma: &Mat3) -> (Vec3, Quat) {
    let r = quat_to_rotation(rotation);
    let s = log_scale.map(f64::exp);
    let m = r * Mat3::from_diagonal(&s);
    let grad_m = (grad_sigma + grad_sigma.transpose()) * m;
    let grad_r = grad_m * Mat3::from_diagonal(&s);
    let mut grad_log = Vec3::zeros();
    for i in 0..3 {
        grad_log[i] = grad_m.column(i).dot(&m.column(i));
    }
    (grad_log, quat_rotation_backward(rotation, &grad_r))
}

fn check_scale_floor(splat: &GaussianSplat) -> Result<()> {
    let s = splat.scales();
    if s.iter().any(|&v| !(v >= SCALE_FLOOR)) {
        return Err(Error::DegenerateSplat(format!("axis scales {s:?} below floor {SCALE_FLOOR:e}")));
    }
    Ok(())
}

/// Unnormalized density `exp(-½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
pub fn eval_gaussian(splat: &GaussianSplat, x: &Vec3) -> Result<f64> {
    Ok(eval_gaussian_with_grad(splat, x)?.0)
}

/// Density together with its gradient with respect to position, log-scale
/// and rotation (the other fields of the returned gradient are zero).
pub fn eval_gaussian_with_grad(splat: &GaussianSplat, x: &Vec3) -> Result<(f64, SplatGrad)> {
    check_finite(x.as_slice(), "query point")?;
    if !splat.is_finite() {
        return Err(Error::InvalidParameter("non-finite splat".into()));
    }
    check_scale_floor(splat)?;
    let r = splat.rotation_matrix();
    let inv_s = splat.log_scale.map(|l| (-l).exp());
    let d = x - splat.position;
    let local = r.transpose() * d;
    let u = local.component_mul(&inv_s);
    let g = (-0.5 * u.norm_squared()).exp();

    let mut grad = SplatGrad::zeros(splat.sh_coeffs.len());
    // Σ⁻¹ d = R S⁻¹ u
    grad.position = g * (r * u.component_mul(&inv_s));
    grad.log_scale = g * u.component_mul(&u);
    // ∂m/∂R[r,i] = 2 s_i⁻² (R[:,i]·d) d_r
    let mut grad_r = Mat3::zeros();
    for i in 0..3 {
        let coef = -g * inv_s[i] * inv_s[i] * local[i];
        for row in 0..3 {
            grad_r[(row, i)] = coef * d[row];
        }
    }
    grad.rotation = quat_rotation_backward(&splat.rotation, &grad_r);
    Ok((g, grad))
}

/// Reparameterized draw `μ + R diag(exp(log_scale)) ε`.
pub fn sample_splat(splat: &GaussianSplat, eps: &Vec3) -> Vec3 {
    splat.position + splat.rotation_matrix() * splat.scales().component_mul(eps)
}

/// Like [`sample_splat`] but reusing a precomputed rotation and scale.
pub(crate) fn sample_with(position: &Vec3, rot: &Mat3, scales: &Vec3, eps: &Vec3) -> Vec3 {
    position + rot * scales.component_mul(eps)
}

/// Gradient of a scalar through [`sample_splat`], given `∂L/∂x`.
pub fn sample_splat_backward(splat: &GaussianSplat, eps: &Vec3, grad_x: &Vec3) -> (Vec3, Vec3, Quat) {
    let r = splat.rotation_matrix();
    let scaled = splat.scales().component_mul(eps);
    let mut grad_log = Vec3::zeros();
    for i in 0..3 {
        grad_log[i] = scaled[i] * r.column(i).dot(grad_x);
    }
    let grad_r = grad_x * scaled.transpose();
    (*grad_x, grad_log, quat_rotation_backward(&splat.rotation, &grad_r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{quat_from_axis_angle, quat_identity};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::FRAC_PI_2;

    fn splat(log_scale: Vec3, rotation: Quat) -> GaussianSplat {
        GaussianSplat::new(Vec3::new(0.3, -0.2, 1.1), log_scale, rotation, 0.0, vec![Vec3::zeros()])
    }

    #[test]
    fn covariance_identity_and_diagonal_cases() {
        let q = quat_identity();
        assert_relative_eq!(
            covariance_from_scale_rotation(&Vec3::zeros(), &q).unwrap(),
            Mat3::identity(),
            epsilon = 1e-15
        );
        let ls = Vec3::new(1f64.ln(), 2f64.ln(), 3f64.ln());
        assert_relative_eq!(
            covariance_from_scale_rotation(&ls, &q).unwrap(),
            Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 9.0)),
            epsilon = 1e-12
        );
        let rz = quat_from_axis_angle(Vec3::z(), FRAC_PI_2);
        assert_relative_eq!(
            covariance_from_scale_rotation(&Vec3::zeros(), &rz).unwrap(),
            Mat3::identity(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_rejects_bad_inputs() {
        let bad = covariance_from_scale_rotation(&Vec3::new(f64::NAN, 0.0, 0.0), &quat_identity());
        assert!(matches!(bad, Err(Error::InvalidParameter(_))));
        let not_unit = covariance_from_scale_rotation(&Vec3::zeros(), &Quat::new(2.0, 0.0, 0.0, 0.0));
        assert!(matches!(not_unit, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn eval_gaussian_hand_values() {
        let s = splat(Vec3::zeros(), quat_identity());
        assert_eq!(eval_gaussian(&s, &s.position).unwrap(), 1.0);
        let x = s.position + Vec3::new(1.0, 1.0, 0.0);
        assert_relative_eq!(eval_gaussian(&s, &x).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(eval_gaussian(&s, &x).unwrap(), 0.36787944117144233, epsilon = 1e-15);

        let d = splat(Vec3::new(0.0, 2f64.ln(), 3f64.ln()), quat_identity());
        let x = d.position + Vec3::x();
        assert_relative_eq!(eval_gaussian(&d, &x).unwrap(), 0.6065306597126334, epsilon = 1e-15);
    }

    #[test]
    fn eval_gaussian_rejects_degenerate_scale() {
        let s = splat(Vec3::new(-30.0, 0.0, 0.0), quat_identity());
        assert!(matches!(eval_gaussian(&s, &Vec3::zeros()), Err(Error::DegenerateSplat(_))));
    }

    #[test]
    fn sample_splat_hand_values() {
        let s = splat(Vec3::zeros(), quat_identity());
        assert_eq!(sample_splat(&s, &Vec3::zeros()), s.position);
        assert_relative_eq!(
            sample_splat(&s, &Vec3::new(1.0, 2.0, 3.0)),
            s.position + Vec3::new(1.0, 2.0, 3.0),
            epsilon = 1e-15
        );
        let r = splat(Vec3::new(2f64.ln(), 0.0, 0.0), quat_from_axis_angle(Vec3::z(), FRAC_PI_2));
        assert_relative_eq!(sample_splat(&r, &Vec3::x()), r.position + Vec3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn covariance_eigenvalues_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let ls = Vec3::from_fn(|_, _| rand::Rng::gen_range(&mut rng, -6.0..3.0));
            let q = crate::math::quat_normalized(&Quat::from_fn(|_, _| StandardNormal.sample(&mut rng)));
            let sigma = covariance_from_scale_rotation(&ls, &q).unwrap();
            assert_relative_eq!(sigma, sigma.transpose(), epsilon = 1e-9);
            let eig = sigma.symmetric_eigen();
            let scale = eig.eigenvalues.amax();
            assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12 * scale.max(1.0)));
        }
    }

    #[test]
    fn empirical_covariance_matches_factorization() {
        let s = splat(Vec3::new(0.2, -0.4, 0.7), quat_from_axis_angle(Vec3::new(1.0, -2.0, 0.5), 0.9));
        let sigma = s.covariance();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut acc = Mat3::zeros();
        let mut mean = Vec3::zeros();
        for _ in 0..n {
            let eps = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let d = sample_splat(&s, &eps) - s.position;
            mean += d;
            acc += d * d.transpose();
        }
        mean /= n as f64;
        let emp = acc / n as f64 - mean * mean.transpose();
        let largest = sigma.symmetric_eigen().eigenvalues.amax();
        for (a, b) in emp.iter().zip(sigma.iter()) {
            assert!((a - b).abs() / largest < 0.02, "{a} vs {b}");
        }
    }

    fn fd_check(analytic: f64, f: impl Fn(f64) -> f64) {
        let h = 1e-5;
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        assert!((analytic - fd).abs() / denom < 1e-4, "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn eval_gaussian_gradients_match_finite_differences() {
        let s = splat(Vec3::new(0.1, -0.3, 0.25), crate::math::quat_normalized(&Quat::new(0.9, 0.2, -0.3, 0.1)));
        let x = s.position + Vec3::new(0.6, -0.4, 0.9);
        let (_, grad) = eval_gaussian_with_grad(&s, &x).unwrap();
        for k in 0..3 {
            fd_check(grad.position[k], |h| {
                let mut t = s.clone();
                t.position[k] += h;
                eval_gaussian(&t, &x).unwrap()
            });
            fd_check(grad.log_scale[k], |h| {
                let mut t = s.clone();
                t.log_scale[k] += h;
                eval_gaussian(&t, &x).unwrap()
            });
        }
        for k in 0..4 {
            fd_check(grad.rotation[k], |h| {
                let mut t = s.clone();
                t.rotation[k] += h;
                eval_gaussian_with_grad(&t, &x).unwrap().0
            });
        }
    }

    #[test]
    fn sample_gradients_match_finite_differences() {
        let s = splat(Vec3::new(0.1, -0.3, 0.25), crate::math::quat_normalized(&Quat::new(0.7, -0.4, 0.5, 0.3)));
        let eps = Vec3::new(0.7, -1.3, 0.4);
        let w = Vec3::new(0.3, -0.8, 1.1);
        let (gp, gl, gq) = sample_splat_backward(&s, &eps, &w);
        let f = |t: &GaussianSplat| sample_splat(t, &eps).dot(&w);
        for k in 0..3 {
            fd_check(gp[k], |h| {
                let mut t = s.clone();
                t.position[k] += h;
                f(&t)
            });
            fd_check(gl[k], |h| {
                let mut t = s.clone();
                t.log_scale[k] += h;
                f(&t)
            });
        }
        for k in 0..4 {
            fd_check(gq[k], |h| {
                let mut t = s.clone();
                t.rotation[k] += h;
                f(&t)
            });
        }
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let ls = Vec3::new(0.3, -0.5, 0.1);
        let q = crate::math::quat_normalized(&Quat::new(0.6, 0.3, -0.2, 0.7));
        let w = Mat3::new(0.4, 0.1, -0.3, 0.2, -0.7, 0.5, 0.9, 0.3, 0.2);
        let f = |ls: &Vec3, q: &Quat| {
            let m = quat_to_rotation(q) * Mat3::from_diagonal(&ls.map(f64::exp));
            (m * m.transpose()).component_mul(&w).sum()
        };
        let (gl, gq) = covariance_backward(&ls, &q, &w);
        for k in 0..3 {
            fd_check(gl[k], |h| {
                let mut t = ls;
                t[k] += h;
                f(&t, &q)
            });
        }
        for k in 0..4 {
            fd_check(gq[k], |h| {
                let mut t = q;
                t[k] += h;
                f(&ls, &t)
            });
        }
    }

    proptest! {
        #[test]
        fn isotropic_density_depends_only_on_radius(
            log_s in -1.0f64..1.0,
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..6.0,
            u in prop::array::uniform3(-2.0f64..2.0),
            other in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let q = quat_from_axis_angle(axis, angle);
            let s = splat(Vec3::repeat(log_s), q);
            let u = Vec3::from(u);
            let other = Vec3::from(other);
            prop_assume!(other.norm() > 1e-6);
            let v = other.normalize() * u.norm();
            let scales = s.scales();
            let xa = s.position + s.rotation_matrix() * scales.component_mul(&u);
            let xb = s.position + s.rotation_matrix() * scales.component_mul(&v);
            let ga = eval_gaussian(&s, &xa).unwrap();
            let gb = eval_gaussian(&s, &xb).unwrap();
            prop_assert!((ga - gb).abs() < 1e-12);
        }
    }
}
