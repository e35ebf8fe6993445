//! Pinhole camera, rigid poses and two-view epipolar geometry.
//!
//! Poses map world points into the camera frame (`x_cam = R x_world + t`).
//! Quaternions are stored as `[w, x, y, z]` with the Hamilton product.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default near-plane distance; points at or in front of it are rejected.
pub const Z_NEAR: f64 = 1e-4;

/// Denominators of the Sampson distance below this value yield `+inf`.
const SAMPSON_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera-frame ray through `pixel` with unit z component.
    #[inline]
    pub fn ray(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point. The caller guarantees `p.z > 0`.
    #[inline]
    pub fn project_camera(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

// ---------------------------------------------------------------------------
// Quaternion helpers

pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Unit quaternion with the same direction; a zero quaternion maps to the identity.
pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n == 0.0 || !n.is_finite() {
        return QUAT_IDENTITY;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_conjugate(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_dot(a: &Quat, b: &Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rotation(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
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

/// Unit quaternion of a rotation matrix (Shepperd's method).
pub fn rotation_to_quat(r: &Matrix3<f64>) -> Quat {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    quat_normalize(&q)
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Quat {
    let n = axis.norm();
    if n == 0.0 {
        return QUAT_IDENTITY;
    }
    let a = axis / n;
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Pulls a gradient on `R(q)` back to the (unit) quaternion components,
/// treating the quaternion entries of the closed-form matrix as free.
pub fn rotation_vjp(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Gradient through `q / |q|`: maps a gradient on the normalized quaternion
/// back onto the raw parameters `raw`.
pub fn normalize_vjp(raw: &Quat, d_unit: &Quat) -> Quat {
    let n = quat_norm(raw);
    if n == 0.0 {
        return [0.0; 4];
    }
    let u = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let proj = quat_dot(&u, d_unit);
    [
        (d_unit[0] - proj * u[0]) / n,
        (d_unit[1] - proj * u[1]) / n,
        (d_unit[2] - proj * u[2]) / n,
        (d_unit[3] - proj * u[3]) / n,
    ]
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// ---------------------------------------------------------------------------
// Poses

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    q: Quat,
    pub t: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            q: QUAT_IDENTITY,
            t: Vector3::zeros(),
        }
    }

    /// Builds a pose, normalizing `q`.
    pub fn new(q: Quat, t: Vector3<f64>) -> Self {
        Self {
            q: quat_normalize(&q),
            t,
        }
    }

    pub fn from_rotation(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self {
            q: rotation_to_quat(r),
            t,
        }
    }

    /// Pose of a camera centred at `center` whose camera-to-world rotation is `r_wc`.
    pub fn from_camera_to_world(r_wc: &Matrix3<f64>, center: &Vector3<f64>) -> Self {
        let r = r_wc.transpose();
        Self::from_rotation(&r, -(r * center))
    }

    pub fn q(&self) -> Quat {
        self.q
    }

    pub fn set_q(&mut self, q: Quat) {
        self.q = quat_normalize(&q);
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.q)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.t
    }

    pub fn inverse(&self) -> Self {
        let q = quat_conjugate(&self.q);
        let r = quat_to_rotation(&q);
        Self { q, t: -(r * self.t) }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            q: quat_normalize(&quat_mul(&self.q, &other.q)),
            t: self.rotation() * other.t + self.t,
        }
    }

    /// Camera centre in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.t)
    }

    /// Geodesic angle of the rotation part, in radians.
    pub fn rotation_angle(&self) -> f64 {
        let w = self.q[0].abs().min(1.0);
        let v = (self.q[1] * self.q[1] + self.q[2] * self.q[2] + self.q[3] * self.q[3]).sqrt();
        2.0 * v.atan2(w)
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite()) && self.t.iter().all(|v| v.is_finite())
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.q[0], self.q[1], self.q[2], self.q[3], self.t.x, self.t.y, self.t.z]
    }

    pub fn from_array(a: &[f64; 7]) -> Self {
        Self::new([a[0], a[1], a[2], a[3]], Vector3::new(a[4], a[5], a[6]))
    }
}

/// `b ∘ a⁻¹`, the motion taking camera frame `a` to camera frame `b`.
pub fn relative_pose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    b.compose(&a.inverse())
}

// ---------------------------------------------------------------------------
// Projection

pub fn project(p_world: &Vector3<f64>, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    project_clipped(p_world, pose, k, Z_NEAR)
}

pub fn project_clipped(
    p_world: &Vector3<f64>,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    z_near: f64,
) -> Result<Vector2<f64>> {
    let p = pose.transform_point(p_world);
    if !(p.z > z_near) {
        return Err(Error::DepthBehindCamera { z: p.z });
    }
    Ok(k.project_camera(&p))
}

/// World point seen at `pixel` whose camera-frame depth is `depth`.
pub fn unproject(pixel: &Vector2<f64>, depth: f64, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    let p_cam = k.ray(*pixel) * depth;
    Ok(pose.rotation().transpose() * (p_cam - pose.t))
}

// ---------------------------------------------------------------------------
// Epipolar geometry

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    pub f: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Algebraic epipolar residual `x'ᵀ F x`.
    pub fn residual(&self, x: &Vector2<f64>, x_prime: &Vector2<f64>) -> f64 {
        let a = Vector3::new(x.x, x.y, 1.0);
        let b = Vector3::new(x_prime.x, x_prime.y, 1.0);
        b.dot(&(self.f * a))
    }

    pub fn transpose(&self) -> Self {
        Self { f: self.f.transpose() }
    }
}

/// Fundamental matrix mapping pixels of view `a` to epipolar lines of view `b`.
///
/// The relative translation is normalized to unit length, so the result is
/// independent of the baseline magnitude.
pub fn fundamental_from_poses(a: &PoseSE3, b: &PoseSE3, k: &CameraIntrinsics) -> Result<FundamentalMatrix> {
    let rel = relative_pose(a, b);
    let norm = rel.t.norm();
    if !(norm > 1e-9) {
        return Err(Error::DegenerateBaseline { norm });
    }
    let essential = skew(&(rel.t / norm)) * rel.rotation();
    let k_inv = k.inverse_matrix();
    Ok(FundamentalMatrix {
        f: k_inv.transpose() * essential * k_inv,
    })
}

/// First-order geometric error of the correspondence `x ↔ x'` under `f`.
pub fn sampson_distance(x: &Vector2<f64>, x_prime: &Vector2<f64>, f: &FundamentalMatrix) -> f64 {
    let a = Vector3::new(x.x, x.y, 1.0);
    let b = Vector3::new(x_prime.x, x_prime.y, 1.0);
    let fx = f.f * a;
    let ftx = f.f.transpose() * b;
    let r = b.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if !(den >= SAMPSON_FLOOR) {
        return f64::INFINITY;
    }
    r * r / den
}
