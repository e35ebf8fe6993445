//! Adam updates for camera poses and Gaussian parameters, constant-velocity
//! pose prediction and the two inner loops of reconstruction: pose estimation
//! against a frozen cloud and scene optimization at fixed poses.

use log::{debug, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{projection_flow, projection_flow_vjp, FlowField};
use crate::geometry::{quat_dot, quat_norm, CameraIntrinsics, PoseSE3, Quat};
use crate::grid::{DepthMap, Grid, Mask, RgbImage};
use crate::losses::{flow_loss, photometric_loss, LossWeights};
use crate::rasterizer::{render_backward, render_with, RenderSettings, SceneGradients};
use crate::scene::{densify_and_prune, DensifyReport, GaussianCloud};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const POSE_LR: f64 = 4e-3;

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub group: &'static str,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(group: &'static str, lr: f64, len: usize) -> Self {
        Self {
            group,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update. A non-finite gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter length changed under `{}`", self.group);
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch in `{}`", self.group);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { group: self.group });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Rebuilds the moments for a reshaped parameter set: entry `i` takes the
    /// state of row `origin[i]` (rows are `width` wide), or zeros when `None`.
    pub fn remap(&mut self, origin: &[Option<usize>], width: usize) {
        let mut m = vec![0.0; origin.len() * width];
        let mut v = vec![0.0; origin.len() * width];
        for (i, o) in origin.iter().enumerate() {
            if let Some(src) = o {
                m[i * width..(i + 1) * width].copy_from_slice(&self.m[src * width..(src + 1) * width]);
                v[i * width..(i + 1) * width].copy_from_slice(&self.v[src * width..(src + 1) * width]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Free pose parameters: a raw quaternion normalized on read and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub q: Quat,
    pub t: Vector3<f64>,
}

impl PoseParams {
    pub fn from_pose(p: &PoseSE3) -> Self {
        Self { q: p.q(), t: p.t }
    }

    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::new(self.q, self.t)
    }

    fn as_array(&self) -> [f64; 7] {
        [self.q[0], self.q[1], self.q[2], self.q[3], self.t.x, self.t.y, self.t.z]
    }

    fn from_array(a: &[f64; 7]) -> Self {
        Self {
            q: [a[0], a[1], a[2], a[3]],
            t: Vector3::new(a[4], a[5], a[6]),
        }
    }
}

/// Linear extrapolation `2 x_t - x_{t-1}` of quaternion and translation, with
/// the older quaternion sign-aligned to the newer one and the result
/// normalized. Without an older pose the latest one is returned.
pub fn predict_pose_const_velocity(pose_prev2: Option<&PoseSE3>, pose_prev: &PoseSE3) -> PoseSE3 {
    let Some(older) = pose_prev2 else {
        return *pose_prev;
    };
    let q1 = pose_prev.q();
    let mut q0 = older.q();
    if quat_dot(&q0, &q1) < 0.0 {
        q0 = q0.map(|v| -v);
    }
    let q = [
        q1[0] + (q1[0] - q0[0]),
        q1[1] + (q1[1] - q0[1]),
        q1[2] + (q1[2] - q0[2]),
        q1[3] + (q1[3] - q0[3]),
    ];
    PoseSE3::new(q, pose_prev.t + (pose_prev.t - older.t))
}

/// Flow supervision for a pose: rendered depth at the source pose, the prior
/// flow from the source frame into the frame being posed, and the pixel mask.
#[derive(Debug, Clone, Copy)]
pub struct FlowGuide<'a> {
    pub source_depth: &'a DepthMap,
    pub source_pose: &'a PoseSE3,
    pub prior: &'a FlowField,
    pub mask: &'a Mask,
}

#[derive(Debug, Clone, Copy)]
pub struct PoseTarget<'a> {
    pub frame: usize,
    pub image: &'a RgbImage,
    pub flow: Option<FlowGuide<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: PoseSE3,
    pub objective: f64,
    pub initial_objective: f64,
    /// Objective of every evaluated iterate, starting with the initial pose.
    pub history: Vec<f64>,
}

/// Pose objective and its gradient with respect to the raw parameters.
pub fn pose_objective_and_grad(
    cloud: &GaussianCloud,
    k: &CameraIntrinsics,
    target: &PoseTarget,
    params: &PoseParams,
    weights: &LossWeights,
    settings: &RenderSettings,
) -> Result<(f64, [f64; 7])> {
    let pose = params.pose();
    let out = render_with(cloud, &pose, k, settings)?;
    let (rgb, mut g_img) = photometric_loss(&out.color, target.image, weights.lambda_dssim)?;
    let mut flow_value = 0.0;
    let mut g_unit = [0.0; 4];
    let mut g_t = Vector3::zeros();
    if weights.lambda_rgb > 0.0 {
        g_img.as_mut_slice().iter_mut().flatten().for_each(|v| *v *= weights.lambda_rgb);
        let g = render_backward(cloud, &pose, k, &out, &g_img, None, None)?;
        g_unit = g.pose_q;
        g_t += g.pose_t;
    }
    if let Some(guide) = target.flow {
        if weights.lambda_flow > 0.0 {
            let proj = projection_flow(guide.source_depth, guide.source_pose, &pose, k);
            let (value, mut g_flow) = flow_loss(&proj, guide.prior, guide.mask)?;
            flow_value = value;
            g_flow.as_mut_slice().iter_mut().flatten().for_each(|v| *v *= weights.lambda_flow);
            let g = projection_flow_vjp(guide.source_depth, guide.source_pose, &pose, k, &g_flow)?;
            for i in 0..4 {
                g_unit[i] += g.pose_next_q[i];
            }
            g_t += g.pose_next_t;
        }
    }
    // Gradients above are taken at the unit quaternion; rescale to the raw one.
    let inv = 1.0 / quat_norm(&params.q);
    let grad = [g_unit[0] * inv, g_unit[1] * inv, g_unit[2] * inv, g_unit[3] * inv, g_t.x, g_t.y, g_t.z];
    Ok((weights.pose_objective(rgb, flow_value), grad))
}

/// Iteration budget and step sizes for [`estimate_pose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSolver {
    pub iters: usize,
    pub lr: f64,
    /// Translation is optimized in units of this length, so one Adam step
    /// moves it by `lr * translation_scale`. Twice the scene depth makes a
    /// translation step shift the image about as much as a quaternion step.
    pub translation_scale: f64,
}

impl PoseSolver {
    pub fn new(iters: usize, lr: f64) -> Self {
        Self {
            iters,
            lr,
            translation_scale: 1.0,
        }
    }

    pub fn with_translation_scale(self, translation_scale: f64) -> Self {
        Self {
            translation_scale,
            ..self
        }
    }
}

/// Adam on the pose alone with the cloud frozen. Every iterate is scored and
/// the best one returned, so the result never scores worse than `init`.
pub fn estimate_pose(
    cloud: &GaussianCloud,
    k: &CameraIntrinsics,
    target: &PoseTarget,
    init: &PoseSE3,
    solver: &PoseSolver,
    weights: &LossWeights,
    settings: &RenderSettings,
) -> Result<PoseEstimate> {
    let (iters, lr, ts) = (solver.iters, solver.lr, solver.translation_scale);
    if iters == 0 {
        return Ok(PoseEstimate {
            pose: *init,
            objective: f64::NAN,
            initial_objective: f64::NAN,
            history: Vec::new(),
        });
    }
    let mut params = PoseParams::from_pose(init);
    let mut adam = Adam::new("pose", lr, 7);
    let mut history = Vec::with_capacity(iters + 1);
    let mut best = (f64::INFINITY, params);
    for it in 0..=iters {
        let (value, grad) = pose_objective_and_grad(cloud, k, target, &params, weights, settings)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { frame: target.frame });
        }
        history.push(value);
        if value < best.0 {
            best = (value, params);
        }
        if it == iters {
            break;
        }
        let mut raw = params.as_array();
        let mut grad = grad;
        for i in 4..7 {
            raw[i] /= ts;
            grad[i] *= ts;
        }
        let r = adam.step(&mut raw, &grad);
        for v in &mut raw[4..7] {
            *v *= ts;
        }
        if let Err(e) = r {
            warn!("frame {}: pose step {it} skipped: {e}", target.frame);
            return Err(Error::NonFiniteLoss { frame: target.frame });
        }
        params = PoseParams::from_array(&raw);
    }
    debug!(
        "frame {}: pose objective {:.6e} -> {:.6e} over {iters} iterations",
        target.frame, history[0], best.0
    );
    Ok(PoseEstimate {
        pose: best.1.pose(),
        objective: best.0,
        initial_objective: history[0],
        history,
    })
}

/// Per-group learning rates for Gaussian parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneLearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for SceneLearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

/// Adam state for every Gaussian parameter group plus the positional
/// gradient statistics that drive densification.
#[derive(Debug, Clone)]
pub struct SceneOptimizer {
    positions: Adam,
    rotations: Adam,
    log_scales: Adam,
    opacity: Adam,
    sh_dc: Adam,
    sh_rest: Adam,
    grad_sum: Vec<f64>,
    grad_count: Vec<u32>,
}

impl SceneOptimizer {
    pub fn new(cloud: &GaussianCloud, lrs: &SceneLearningRates, extent: f64) -> Self {
        let n = cloud.len();
        let nc = cloud.coeffs_per_gaussian();
        Self {
            positions: Adam::new("positions", lrs.position * extent, 3 * n),
            rotations: Adam::new("rotations", lrs.rotation, 4 * n),
            log_scales: Adam::new("log_scales", lrs.scale, 3 * n),
            opacity: Adam::new("opacity", lrs.opacity, n),
            sh_dc: Adam::new("sh_dc", lrs.sh_dc, 3 * n),
            sh_rest: Adam::new("sh_rest", lrs.sh_rest, 3 * n * (nc - 1)),
            grad_sum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    /// Applies one update per group and renormalizes rotations. Groups with a
    /// non-finite gradient are skipped and reported.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &SceneGradients) -> Vec<&'static str> {
        let n = cloud.len();
        let nc = cloud.coeffs_per_gaussian();
        let mut skipped = Vec::new();
        let mut note = |r: Result<()>| {
            if let Err(Error::NonFiniteGradient { group }) = r {
                warn!("skipping update of `{group}`: non-finite gradient");
                skipped.push(group);
            }
        };
        note(self.positions.step(cloud.positions.as_flattened_mut(), grads.positions.as_flattened()));
        note(self.rotations.step(cloud.rotations.as_flattened_mut(), grads.rotations.as_flattened()));
        note(self.log_scales.step(cloud.log_scales.as_flattened_mut(), grads.log_scales.as_flattened()));
        note(self.opacity.step(&mut cloud.opacity_logits, &grads.opacity_logits));
        let mut dc = Vec::with_capacity(3 * n);
        let mut dc_grad = Vec::with_capacity(3 * n);
        let mut rest = Vec::with_capacity(3 * n * (nc - 1));
        let mut rest_grad = Vec::with_capacity(3 * n * (nc - 1));
        for i in 0..n {
            for c in 0..nc {
                let (p, g) = (&cloud.sh[i * nc + c], &grads.sh[i * nc + c]);
                if c == 0 {
                    dc.extend_from_slice(p);
                    dc_grad.extend_from_slice(g);
                } else {
                    rest.extend_from_slice(p);
                    rest_grad.extend_from_slice(g);
                }
            }
        }
        note(self.sh_dc.step(&mut dc, &dc_grad));
        note(self.sh_rest.step(&mut rest, &rest_grad));
        let (mut di, mut ri) = (0, 0);
        for i in 0..n {
            for c in 0..nc {
                let dst = &mut cloud.sh[i * nc + c];
                if c == 0 {
                    dst.copy_from_slice(&dc[di..di + 3]);
                    di += 3;
                } else {
                    dst.copy_from_slice(&rest[ri..ri + 3]);
                    ri += 3;
                }
            }
        }
        cloud.renormalize_rotations();
        skipped
    }

    /// Adds this view's image-space positional gradient norms to the statistics.
    pub fn accumulate_stats(&mut self, grads: &SceneGradients) {
        for i in 0..self.grad_sum.len() {
            if grads.visible[i] {
                self.grad_sum[i] += grads.mean2d_norm[i];
                self.grad_count[i] += 1;
            }
        }
    }

    /// Mean accumulated positional gradient per Gaussian.
    pub fn mean_grad_stats(&self) -> Vec<f64> {
        self.grad_sum
            .iter()
            .zip(&self.grad_count)
            .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
            .collect()
    }

    pub fn reset_stats(&mut self) {
        self.grad_sum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }

    /// Densifies and prunes `cloud`, carries optimizer state over to surviving
    /// Gaussians and resets the gradient statistics.
    pub fn densify<R: rand::Rng>(
        &mut self,
        cloud: &mut GaussianCloud,
        opacity_floor: f64,
        grad_threshold: f64,
        split_scale_threshold: f64,
        rng: &mut R,
    ) -> DensifyReport {
        let stats = self.mean_grad_stats();
        let (next, report) = densify_and_prune(cloud, &stats, opacity_floor, grad_threshold, split_scale_threshold, rng);
        let nc = next.coeffs_per_gaussian();
        self.positions.remap(&report.origin, 3);
        self.rotations.remap(&report.origin, 4);
        self.log_scales.remap(&report.origin, 3);
        self.opacity.remap(&report.origin, 1);
        self.sh_dc.remap(&report.origin, 3);
        self.sh_rest.remap(&report.origin, 3 * (nc - 1));
        *cloud = next;
        self.grad_sum = vec![0.0; cloud.len()];
        self.grad_count = vec![0; cloud.len()];
        report
    }
}

/// Everything needed to score one training view during scene optimization.
#[derive(Debug, Clone, Copy)]
pub struct SceneView<'a> {
    pub frame: usize,
    pub pose: &'a PoseSE3,
    pub image: &'a RgbImage,
    pub prior_depth: Option<&'a DepthMap>,
    /// Flow into the next posed frame; the mask is combined with this view's
    /// own visibility.
    pub flow: Option<SceneFlow<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneFlow<'a> {
    pub next_pose: &'a PoseSE3,
    pub prior: &'a FlowField,
    pub rigid: &'a Mask,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SceneLoss {
    pub rgb: f64,
    pub flow: f64,
    pub depth: f64,
    pub total: f64,
}

/// Scene objective for one view and its gradients with respect to the cloud.
pub fn scene_objective_and_grad(
    cloud: &GaussianCloud,
    k: &CameraIntrinsics,
    view: &SceneView,
    weights: &LossWeights,
    gamma: f64,
    settings: &RenderSettings,
) -> Result<(SceneLoss, SceneGradients)> {
    let out = render_with(cloud, view.pose, k, settings)?;
    let (rgb, mut g_img) = photometric_loss(&out.color, view.image, weights.lambda_dssim)?;
    g_img.as_mut_slice().iter_mut().flatten().for_each(|v| *v *= weights.lambda_rgb);
    let visible = crate::rasterizer::visibility_map(&out, gamma);
    let (w, h) = k.dims();
    let mut d_depth = Grid::filled(w, h, 0.0);
    let mut loss = SceneLoss {
        rgb,
        ..SceneLoss::default()
    };
    if let (Some(prior), true) = (view.prior_depth, weights.lambda_depth > 0.0) {
        match crate::losses::depth_loss(&out.depth, prior, &visible) {
            Ok((value, g)) => {
                loss.depth = value;
                for (d, gv) in d_depth.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *d += weights.lambda_depth * gv;
                }
            }
            Err(Error::InsufficientValidPixels { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if let (Some(f), true) = (view.flow, weights.lambda_flow > 0.0) {
        let mask = crate::flow::combine_mask(&visible, f.rigid)?;
        let proj = projection_flow(&out.depth, view.pose, f.next_pose, k);
        let (value, mut g_flow) = flow_loss(&proj, f.prior, &mask)?;
        loss.flow = value;
        g_flow.as_mut_slice().iter_mut().flatten().for_each(|v| *v *= weights.lambda_flow);
        let g = projection_flow_vjp(&out.depth, view.pose, f.next_pose, k, &g_flow)?;
        for (d, gv) in d_depth.as_mut_slice().iter_mut().zip(g.depth.as_slice()) {
            *d += gv;
        }
    }
    loss.total = weights.scene_objective(loss.rgb, loss.flow, loss.depth);
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { frame: view.frame });
    }
    let grads = render_backward(cloud, view.pose, k, &out, &g_img, Some(&d_depth), None)?;
    Ok((loss, grads))
}
