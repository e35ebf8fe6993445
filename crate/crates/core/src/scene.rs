//! The optimizable Gaussian cloud and its per-Gaussian math: covariance
//! construction, perspective projection to image-space splats, colour
//! evaluation, depth-based initialization and adaptive density control.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{quat_normalize, quat_to_rotation, unproject, CameraIntrinsics, PoseSE3, Quat, QUAT_IDENTITY};
use crate::grid::{DepthMap, RgbImage};
use crate::knn::mean_knn_distance;
use crate::sh::{self, num_coeffs};

/// Low-pass term added to both diagonal entries of every projected covariance.
pub const COV2D_DILATION: f64 = 0.3;
/// Split children have their scale divided by this factor.
pub const SPLIT_SCALE_FACTOR: f64 = 1.6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Structure-of-arrays storage for N anisotropic Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    /// Unit quaternions `[w, x, y, z]`.
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// `N * num_coeffs(sh_degree)` RGB coefficient triples, Gaussian-major.
    pub sh: Vec<[f64; 3]>,
    sh_degree: usize,
}

/// One Gaussian's parameters, used for construction and densification.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub rotation: Quat,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_DEGREE, "SH degree {sh_degree} unsupported");
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            sh_degree,
        }
    }

    /// Assembles a cloud from parallel arrays without renormalizing rotations,
    /// so stored values round-trip exactly.
    pub fn from_parts(
        positions: Vec<[f64; 3]>,
        rotations: Vec<Quat>,
        log_scales: Vec<[f64; 3]>,
        opacity_logits: Vec<f64>,
        sh: Vec<[f64; 3]>,
        sh_degree: usize,
    ) -> Result<Self> {
        let n = positions.len();
        let nc = num_coeffs(sh_degree);
        if sh_degree > sh::MAX_DEGREE
            || rotations.len() != n
            || log_scales.len() != n
            || opacity_logits.len() != n
            || sh.len() != n * nc
        {
            return Err(Error::Config(format!("inconsistent Gaussian arrays for {n} Gaussians of SH degree {sh_degree}")));
        }
        Ok(Self {
            positions,
            rotations,
            log_scales,
            opacity_logits,
            sh,
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        num_coeffs(self.sh_degree)
    }

    pub fn push(&mut self, g: Gaussian) {
        let nc = self.coeffs_per_gaussian();
        self.positions.push(g.position);
        self.rotations.push(quat_normalize(&g.rotation));
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        for k in 0..nc {
            self.sh.push(g.sh.get(k).copied().unwrap_or([0.0; 3]));
        }
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh_of(i).to_vec(),
        }
    }

    pub fn sh_of(&self, i: usize) -> &[[f64; 3]] {
        let nc = self.coeffs_per_gaussian();
        &self.sh[i * nc..(i + 1) * nc]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Base (DC) colour of Gaussian `i`.
    pub fn dc_color(&self, i: usize) -> [f64; 3] {
        let c = self.sh_of(i)[0];
        [
            (c[0] * sh::SH_C0 + 0.5).clamp(0.0, 1.0),
            (c[1] * sh::SH_C0 + 0.5).clamp(0.0, 1.0),
            (c[2] * sh::SH_C0 + 0.5).clamp(0.0, 1.0),
        ]
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = quat_normalize(q);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }

    /// Radius of the bounding sphere around the centroid.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut c = Vector3::zeros();
        for p in &self.positions {
            c += Vector3::from(*p);
        }
        c /= self.len() as f64;
        self.positions
            .iter()
            .map(|p| (Vector3::from(*p) - c).norm())
            .fold(0.0, f64::max)
    }

    /// Rounds every parameter to the nearest `f32`, making the cloud exactly
    /// representable in the on-disk format.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        self.positions.iter_mut().flatten().for_each(q);
        self.rotations.iter_mut().flatten().for_each(q);
        self.log_scales.iter_mut().flatten().for_each(q);
        self.opacity_logits.iter_mut().for_each(q);
        self.sh.iter_mut().flatten().for_each(q);
    }

    /// Order-sensitive fingerprint over every parameter bit.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325 ^ self.sh_degree as u64;
        let mut feed = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(PRIME);
        };
        self.positions.iter().flatten().for_each(|v| feed(*v));
        self.rotations.iter().flatten().for_each(|v| feed(*v));
        self.log_scales.iter().flatten().for_each(|v| feed(*v));
        self.opacity_logits.iter().for_each(|v| feed(*v));
        self.sh.iter().flatten().for_each(|v| feed(*v));
        h ^ self.len() as u64
    }

    /// Keeps the Gaussians whose flag is set, preserving order.
    pub fn retain_mask(&self, keep: &[bool]) -> GaussianCloud {
        let mut out = GaussianCloud::new(self.sh_degree);
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            out.push_raw(self, i);
        }
        out
    }

    fn push_raw(&mut self, src: &GaussianCloud, i: usize) {
        self.positions.push(src.positions[i]);
        self.rotations.push(src.rotations[i]);
        self.log_scales.push(src.log_scales[i]);
        self.opacity_logits.push(src.opacity_logits[i]);
        self.sh.extend_from_slice(src.sh_of(i));
    }
}

/// `R S Sᵀ Rᵀ` for a unit quaternion and log-space scales.
pub fn build_covariance(rotation: &Quat, log_scale: &[f64; 3]) -> Matrix3<f64> {
    let r = quat_to_rotation(rotation);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let l = r * Matrix3::from_diagonal(&s);
    l * l.transpose()
}

/// A Gaussian projected into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Image-space covariance after the low-pass dilation.
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the transformed centre.
    pub depth: f64,
    pub view_color: [f64; 3],
    pub alpha: f64,
    pub(crate) p_cam: Vector3<f64>,
    /// Inverse of `cov2d`.
    pub(crate) conic: Matrix2<f64>,
    /// Footprint radius (three standard deviations along the major axis).
    pub(crate) radius: f64,
    pub(crate) color_inside: [bool; 3],
    /// World-space vector from the camera centre to the Gaussian.
    pub(crate) view_vec: Vector3<f64>,
}

/// Perspective Jacobian ∂(u, v)/∂(x, y, z) at a camera-frame point.
pub(crate) fn perspective_jacobian(p: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2, 0.0, k.fy * iz, -k.fy * p.y * iz2)
}

/// Image-space covariance `J W Σ Wᵀ Jᵀ` before dilation.
pub fn projected_covariance(
    position: &[f64; 3],
    rotation: &Quat,
    log_scale: &[f64; 3],
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Matrix2<f64> {
    let w = pose.rotation();
    let p = w * Vector3::from(*position) + pose.t;
    let m = perspective_jacobian(&p, k) * w;
    m * build_covariance(&quat_normalize(rotation), log_scale) * m.transpose()
}

pub fn project_gaussian(
    cloud: &GaussianCloud,
    i: usize,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    z_near: f64,
) -> Result<ProjectedGaussian> {
    let w = pose.rotation();
    project_with_rotation(cloud, i, pose, &w, &pose.camera_center(), k, z_near)
}

/// Projection with the pose rotation and camera centre precomputed.
pub(crate) fn project_with_rotation(
    cloud: &GaussianCloud,
    i: usize,
    pose: &PoseSE3,
    w: &Matrix3<f64>,
    cam_center: &Vector3<f64>,
    k: &CameraIntrinsics,
    z_near: f64,
) -> Result<ProjectedGaussian> {
    let mu = Vector3::from(cloud.positions[i]);
    let p = w * mu + pose.t;
    if !(p.z > z_near) {
        return Err(Error::DepthBehindCamera { z: p.z });
    }
    let m = perspective_jacobian(&p, k) * w;
    let sigma = build_covariance(&quat_normalize(&cloud.rotations[i]), &cloud.log_scales[i]);
    let mut cov2d = m * sigma * m.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += COV2D_DILATION;
    cov2d[(1, 1)] += COV2D_DILATION;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(0, 1)];
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(0, 1)], cov2d[(0, 0)]) / det;
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let view_vec = mu - cam_center;
    let dir = view_vec.normalize();
    let (view_color, color_inside) = sh::eval_sh_with_mask(cloud.sh_of(i), cloud.sh_degree(), &dir);
    Ok(ProjectedGaussian {
        mean2d: k.project_camera(&p),
        cov2d,
        depth: p.z,
        view_color,
        alpha: cloud.opacity(i),
        p_cam: p,
        conic,
        radius: 3.0 * lambda_max.sqrt(),
        color_inside,
        view_vec,
    })
}

/// One Gaussian per `stride`-th pixel with valid depth, coloured by that pixel.
pub fn init_from_depth(
    image: &RgbImage,
    depth: &DepthMap,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    stride: usize,
    sh_degree: usize,
    init_opacity: f64,
) -> Result<GaussianCloud> {
    image.ensure_dims(depth.dims())?;
    let stride = stride.max(1);
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for y in (0..depth.height()).step_by(stride) {
        for x in (0..depth.width()).step_by(stride) {
            let d = *depth.get(x, y);
            if let Ok(p) = unproject(&Vector2::new(x as f64, y as f64), d, pose, k) {
                points.push([p.x, p.y, p.z]);
                colors.push(*image.get(x, y));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyInit);
    }
    let spacing = mean_knn_distance(&points, 3);
    let fallback = spacing.iter().flatten().copied().fold(f64::NAN, f64::min);
    let fallback = if fallback.is_finite() && fallback > 0.0 { fallback } else { 1e-2 };
    let mut cloud = GaussianCloud::new(sh_degree);
    let opacity_logit = logit(init_opacity);
    for ((p, c), s) in points.iter().zip(&colors).zip(&spacing) {
        let ls = s.unwrap_or(fallback).max(1e-7).ln();
        cloud.push(Gaussian {
            position: *p,
            rotation: QUAT_IDENTITY,
            log_scale: [ls; 3],
            opacity_logit,
            sh: vec![sh::rgb_to_dc(*c)],
        });
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// For each output Gaussian, the input index it was carried over from;
    /// `None` for newly created clones and split children.
    pub origin: Vec<Option<usize>>,
}

/// Adaptive density control.
///
/// Gaussians whose mean positional gradient exceeds `grad_threshold` are
/// cloned when their largest scale is at most `split_scale_threshold` and split
/// into two shrunken children otherwise; Gaussians below `opacity_floor` are
/// removed. Untouched Gaussians keep their relative order and exact values;
/// clones and split children are appended. Never returns an empty cloud.
pub fn densify_and_prune<R: Rng>(
    cloud: &GaussianCloud,
    grad_accum: &[f64],
    opacity_floor: f64,
    grad_threshold: f64,
    split_scale_threshold: f64,
    rng: &mut R,
) -> (GaussianCloud, DensifyReport) {
    assert_eq!(grad_accum.len(), cloud.len(), "gradient statistics must match the cloud");
    let n = cloud.len();
    let mut report = DensifyReport::default();
    let mut out = GaussianCloud::new(cloud.sh_degree());
    let mut extra = GaussianCloud::new(cloud.sh_degree());
    let mut origin = Vec::with_capacity(n);
    let split_log_delta = SPLIT_SCALE_FACTOR.ln();

    for i in 0..n {
        let grows = grad_accum[i] > grad_threshold;
        let max_scale = cloud.log_scales[i].iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        if grows && max_scale > split_scale_threshold {
            report.split += 1;
            let r = quat_to_rotation(&cloud.rotations[i]);
            let s = Vector3::from(cloud.log_scales[i]).map(f64::exp);
            for _ in 0..2 {
                let sample = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let offset = r * s.component_mul(&sample);
                let mut g = cloud.gaussian(i);
                g.position = [g.position[0] + offset.x, g.position[1] + offset.y, g.position[2] + offset.z];
                g.log_scale = g.log_scale.map(|v| v - split_log_delta);
                extra.push(g);
            }
            continue;
        }
        out.push_raw(cloud, i);
        origin.push(Some(i));
        if grows {
            report.cloned += 1;
            extra.push_raw(cloud, i);
        }
    }
    for i in 0..extra.len() {
        out.push_raw(&extra, i);
        origin.push(None);
    }

    let keep: Vec<bool> = (0..out.len()).map(|i| out.opacity(i) >= opacity_floor).collect();
    let kept = keep.iter().filter(|k| **k).count();
    report.pruned = out.len() - kept;
    if kept == 0 {
        // Keep the single most opaque Gaussian so the cloud stays non-empty.
        let best = (0..out.len())
            .max_by(|a, b| out.opacity_logits[*a].total_cmp(&out.opacity_logits[*b]))
            .expect("cloud is non-empty");
        let mut keep = vec![false; out.len()];
        keep[best] = true;
        report.pruned = out.len() - 1;
        report.origin = vec![origin[best]];
        return (out.retain_mask(&keep), report);
    }
    if kept == out.len() {
        report.origin = origin;
        return (out, report);
    }
    report.origin = origin.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(o, _)| o).collect();
    (out.retain_mask(&keep), report)
}
