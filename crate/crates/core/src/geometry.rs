//! Rotations and the pinhole camera.
//!
//! Quaternions are stored in `(w, x, y, z)` order. A rotation `R_ab` maps
//! coordinates expressed in frame `{b}` into frame `{a}`; `R_nc` therefore
//! takes camera-frame vectors into the world frame.
//!
//! Camera frame convention: `+z` looks forward along the optical axis, `+x`
//! points right and `+y` points down, so pixel coordinates grow rightward and
//! downward.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("quaternion has zero norm")]
    ZeroNormQuaternion,
    #[error("point is behind the camera (depth {depth})")]
    PointBehindCamera { depth: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("non-finite input")]
    NonFinite,
}

/// A 3D rotation, convertible between unit quaternion, rotation vector and
/// rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Normalizes `(w, x, y, z)`.
    pub fn from_quat(q: [f64; 4]) -> Result<Self, GeometryError> {
        if q.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        if raw.norm() == 0.0 {
            return Err(GeometryError::ZeroNormQuaternion);
        }
        Ok(Self(UnitQuaternion::from_quaternion(raw)))
    }

    pub fn from_rotvec(r: Vec3) -> Self {
        Self(UnitQuaternion::from_scaled_axis(Vector3::from(r)))
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        Self::from_rotvec(scale(normalize(axis), angle))
    }

    /// Projects an approximately orthonormal matrix onto SO(3).
    pub fn from_matrix(m: &Mat3) -> Self {
        let mat = Matrix3::from_fn(|i, j| m[i][j]);
        Self(UnitQuaternion::from_rotation_matrix(
            &Rotation3::from_matrix_eps(&mat, 1e-15, 100, Rotation3::identity()),
        ))
    }

    pub fn to_quat(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn to_rotvec(&self) -> Vec3 {
        self.0.scaled_axis().into()
    }

    pub fn to_matrix(&self) -> Mat3 {
        let m = self.0.to_rotation_matrix();
        let m = m.matrix();
        core::array::from_fn(|i| core::array::from_fn(|j| m[(i, j)]))
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        (self.0 * Vector3::from(v)).into()
    }

    /// Geodesic angle to `other` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.0.angle_to(&other.0)
    }

    pub fn angle(&self) -> f64 {
        self.0.angle()
    }
}

/// Angular magnitude in degrees of a (not necessarily unit) quaternion,
/// `(180/π)·2·atan(‖(q1,q2,q3)‖ / |q0|)`.
pub fn quat_angle_deg(q: [f64; 4]) -> Result<f64, GeometryError> {
    let vec_norm = libm::sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    let w = libm::fabs(q[0]);
    if vec_norm == 0.0 && w == 0.0 {
        return Err(GeometryError::ZeroNormQuaternion);
    }
    Ok(libm::atan2(vec_norm, w).to_degrees() * 2.0)
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Returns `R_nc · x_c`.
pub fn rotate_world_from_cam(r_nc: &Rotation, x_c: Vec3) -> Vec3 {
    r_nc.apply(x_c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) {
            return Err(GeometryError::InvalidIntrinsics("cx outside image"));
        }
        if !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics("cy outside image"));
        }
        Ok(())
    }

    /// Whether a pixel lies inside the image bounds.
    pub fn contains(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[1] >= 0.0 && uv[0] < self.width as f64 && uv[1] < self.height as f64
    }
}

/// Pinhole projection of a camera-frame point to pixels.
pub fn project(x_cam: Vec3, k: &CameraIntrinsics) -> Result<[f64; 2], GeometryError> {
    let z = x_cam[2];
    if !(z > 0.0) {
        return Err(GeometryError::PointBehindCamera { depth: z });
    }
    Ok([k.fx * x_cam[0] / z + k.cx, k.fy * x_cam[1] / z + k.cy])
}

/// Back-projects a pixel at the given depth.
pub fn unproject(uv: [f64; 2], depth: f64, k: &CameraIntrinsics) -> Vec3 {
    [(uv[0] - k.cx) / k.fx * depth, (uv[1] - k.cy) / k.fy * depth, depth]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    core::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    core::array::from_fn(|i| core::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub fn transpose(m: &Mat3) -> Mat3 {
    core::array::from_fn(|i| core::array::from_fn(|j| m[j][i]))
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation whose camera looks along `forward` with image-down along `down`
/// (both world-frame), i.e. `R_nc` for a camera with that attitude.
pub fn look_rotation(forward: Vec3, down_hint: Vec3) -> Rotation {
    let z = normalize(forward);
    let y = normalize(sub(down_hint, scale(z, dot(down_hint, z))));
    let x = cross(y, z);
    let m = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
    Rotation::from_matrix(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 540.0, 960.0, 1080, 1920).unwrap()
    }

    #[test]
    fn quat_angle_examples() {
        assert_eq!(quat_angle_deg([1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        let h = libm::sqrt(0.5);
        assert!((quat_angle_deg([h, 0.0, 0.0, h]).unwrap() - 90.0).abs() < 1e-6);
        let expected = 2.0 * libm::atan(libm::sqrt(3.0)) * 180.0 / PI;
        assert!((quat_angle_deg([0.5, 0.5, 0.5, 0.5]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 120.0).abs() < 1e-9);
        assert_eq!(quat_angle_deg([0.0; 4]), Err(GeometryError::ZeroNormQuaternion));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project([0.0, 0.0, 1.0], &k()).unwrap(), [540.0, 960.0]);
        let uv = project([0.1, 0.0, 1.0], &k()).unwrap();
        assert!((uv[0] - 640.0).abs() < 1e-12 && (uv[1] - 960.0).abs() < 1e-12);
        assert!(matches!(project([0.0, 0.0, -1.0], &k()), Err(GeometryError::PointBehindCamera { .. })));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotate_world_from_cam(&Rotation::identity(), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
        let r = Rotation::from_axis_angle([0.0, 0.0, 1.0], PI);
        let v = rotate_world_from_cam(&r, [1.0, 0.0, 0.0]);
        assert!((v[0] + 1.0).abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn look_rotation_is_proper() {
        let r = look_rotation([1.0, 0.0, 0.2], [0.0, -1.0, 0.0]);
        let m = r.to_matrix();
        assert!((determinant(&m) - 1.0).abs() < 1e-12);
        let f = r.apply([0.0, 0.0, 1.0]);
        let n = normalize([1.0, 0.0, 0.2]);
        assert!(norm(sub(f, n)) < 1e-12);
    }

    fn rotvec() -> impl Strategy<Value = Vec3> {
        // keep the angle below π so the rotation vector is unique
        (prop::array::uniform3(-1.0f64..1.0), 0.0f64..3.1).prop_map(|(a, ang)| scale(normalize(a), ang))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn conversions_round_trip(r in rotvec()) {
            let rot = Rotation::from_rotvec(r);
            let via_quat = Rotation::from_quat(rot.to_quat()).unwrap();
            let via_mat = Rotation::from_matrix(&rot.to_matrix());
            let via_vec = Rotation::from_rotvec(rot.to_rotvec());
            prop_assert!(rot.angle_to(&via_quat) < 1e-9);
            prop_assert!(rot.angle_to(&via_mat) < 1e-9);
            prop_assert!(rot.angle_to(&via_vec) < 1e-9);
            let m = rot.to_matrix();
            prop_assert!((determinant(&m) - 1.0).abs() < 1e-9);
            let mtm = mat_mul(&transpose(&m), &m);
            for i in 0..3 { for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((mtm[i][j] - e).abs() < 1e-9);
            }}
            let q = rot.to_quat();
            prop_assert!((libm::sqrt(q.iter().map(|v| v * v).sum::<f64>()) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rotation_preserves_norm_and_inverts(r in rotvec(), x in prop::array::uniform3(-5.0f64..5.0)) {
            let rot = Rotation::from_rotvec(r);
            let y = rotate_world_from_cam(&rot, x);
            prop_assert!((norm(y) - norm(x)).abs() < 1e-9);
            let back = rot.inverse().apply(y);
            prop_assert!(norm(sub(back, x)) < 1e-9);
        }

        #[test]
        fn quat_angle_sign_invariant(q in prop::array::uniform4(-1.0f64..1.0)) {
            prop_assume!(q.iter().any(|v| *v != 0.0));
            let neg = [-q[0], -q[1], -q[2], -q[3]];
            prop_assert_eq!(quat_angle_deg(q).unwrap(), quat_angle_deg(neg).unwrap());
            let a = quat_angle_deg(q).unwrap();
            prop_assert!((0.0..=180.0).contains(&a));
        }

        #[test]
        fn project_unproject_identity(u in 0.0f64..1080.0, v in 0.0f64..1920.0, depth in 0.1f64..20.0) {
            let x = unproject([u, v], depth, &k());
            let uv = project(x, &k()).unwrap();
            prop_assert!((uv[0] - u).abs() < 1e-9 && (uv[1] - v).abs() < 1e-9);
        }
    }
}
