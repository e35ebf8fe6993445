//! Image quality (PSNR, SSIM) and trajectory accuracy (ATE, RPE) metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, PoseSE3};
use crate::grid::RgbImage;

pub use crate::losses::ssim;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` over all channels of unit-range images, capped.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    b.ensure_dims(a.dims())?;
    let mut sum = 0.0;
    for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
        for ch in 0..3 {
            let e = p[ch] - q[ch];
            sum += e * e;
        }
    }
    let mse = sum / (3 * a.len()) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    /// RMSE of camera centres after similarity alignment, in millimetres.
    pub ate: f64,
    /// Mean relative translation error between consecutive frames, in millimetres.
    pub rpe_t: f64,
    /// Mean relative rotation error between consecutive frames, in degrees.
    pub rpe_r: f64,
}

/// Similarity transform `y ≈ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }

    /// Re-expresses a world-to-camera pose in the transformed world frame.
    pub fn apply_to_pose(&self, pose: &PoseSE3) -> PoseSE3 {
        let r_wc = self.rotation * pose.rotation().transpose();
        PoseSE3::from_camera_to_world(&r_wc, &self.apply(&pose.camera_center()))
    }
}

/// Least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s <= 0.0 {
        return Ok(Sim3 {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: mu_d - mu_s,
        });
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let sv = svd.singular_values;
    let trace = sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)];
    let scale = trace / var_s;
    Ok(Sim3 {
        scale,
        rotation,
        translation: mu_d - scale * rotation * mu_s,
    })
}

/// Largest distance between any two camera centres.
pub fn trajectory_extent(poses: &[PoseSE3]) -> f64 {
    let c: Vec<Vector3<f64>> = poses.iter().map(|p| p.camera_center()).collect();
    let mut best: f64 = 0.0;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            best = best.max((c[i] - c[j]).norm());
        }
    }
    best
}

/// RMSE between camera centres without any alignment.
pub fn center_rmse(a: &[PoseSE3], b: &[PoseSE3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p.camera_center() - q.camera_center()).norm_squared())
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Aligns `estimated` to `ground_truth` by a similarity on camera centres.
pub fn align_trajectory(estimated: &[PoseSE3], ground_truth: &[PoseSE3]) -> Result<Vec<PoseSE3>> {
    let src: Vec<_> = estimated.iter().map(|p| p.camera_center()).collect();
    let dst: Vec<_> = ground_truth.iter().map(|p| p.camera_center()).collect();
    let sim = umeyama(&src, &dst)?;
    Ok(estimated.iter().map(|p| sim.apply_to_pose(p)).collect())
}

/// ATE and RPE after similarity alignment; `units_to_mm` converts world units.
pub fn evaluate_trajectory(estimated: &[PoseSE3], ground_truth: &[PoseSE3], units_to_mm: f64) -> Result<TrajectoryMetrics> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::LengthMismatch(estimated.len(), ground_truth.len()));
    }
    if estimated.len() < 2 {
        return Err(Error::TooFewFrames {
            required: 2,
            actual: estimated.len(),
        });
    }
    let aligned = align_trajectory(estimated, ground_truth)?;
    let ate = center_rmse(&aligned, ground_truth)?;
    let mut rpe_t = 0.0;
    let mut rpe_r = 0.0;
    let pairs = aligned.len() - 1;
    for i in 0..pairs {
        let est = relative_pose(&aligned[i], &aligned[i + 1]);
        let gt = relative_pose(&ground_truth[i], &ground_truth[i + 1]);
        let err = gt.inverse().compose(&est);
        rpe_t += err.t.norm();
        rpe_r += err.rotation_angle().to_degrees();
    }
    Ok(TrajectoryMetrics {
        ate: ate * units_to_mm,
        rpe_t: rpe_t / pairs as f64 * units_to_mm,
        rpe_r: rpe_r / pairs as f64,
    })
}
