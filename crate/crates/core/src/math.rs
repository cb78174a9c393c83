//! Small linear-algebra helpers shared by the differentiable paths.
//!
//! Quaternions are stored as `Vector4` in `(w, x, y, z)` order and are not
//! assumed to be normalized; every consumer normalizes on the way in and the
//! backward helpers chain through that normalization.

use nalgebra::{Matrix3, Vector3, Vector4};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = Vector4<f64>;

pub const IDENTITY_QUAT: Quat = Vector4::new(1.0, 0.0, 0.0, 0.0);

pub fn quat_identity() -> Quat {
    IDENTITY_QUAT
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    Quat::new(c, a.x * s, a.y * s, a.z * s)
}

pub fn quat_normalized(q: &Quat) -> Quat {
    q / q.norm()
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Quat::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

pub fn quat_to_rotation(q: &Quat) -> Mat3 {
    let n = quat_normalized(q);
    rotation_of_unit(&n)
}

fn rotation_of_unit(n: &Quat) -> Mat3 {
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix to unit quaternion (Shepperd's method), `w >= 0`.
pub fn rotation_to_quat(r: &Mat3) -> Quat {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let uq = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let q = uq.into_inner();
    let out = Quat::new(q.w, q.i, q.j, q.k);
    if out[0] < 0.0 {
        -out
    } else {
        out
    }
}

/// Pulls a gradient on the rotation matrix back to the (unnormalized)
/// quaternion it was built from.
pub fn quat_rotation_backward(q: &Quat, grad_r: &Mat3) -> Quat {
    let norm = q.norm();
    let n = q / norm;
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    let g = grad_r;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gn = Quat::new(dw, dx, dy, dz);
    (gn - n * n.dot(&gn)) / norm
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}
