//! Progressive reconstruction: seed the scene from the first frame, then for
//! each new frame estimate its pose against the current scene and refine the
//! scene on randomly sampled posed frames, growing and pruning Gaussians on a
//! fixed cadence. Held-out frames are posed against the final scene.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::flow::{combine_mask, compose_flow, rigid_mask, FlowField};
use crate::formats::quantize_u8;
use crate::geometry::{quat_dot, quat_normalize, quat_to_rotation, CameraIntrinsics, PoseSE3};
use crate::grid::{DepthMap, Grid, Mask};
use crate::losses::ssim;
use crate::metrics::psnr;
use crate::optimizer::{
    estimate_pose, predict_pose_const_velocity, scene_objective_and_grad, FlowGuide, PoseTarget, SceneFlow,
    PoseSolver, SceneOptimizer, SceneView,
};
use crate::rasterizer::{render_with, visibility_map, RenderSettings};
use crate::scene::{init_from_depth, GaussianCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameRole {
    Train,
    Test,
}

/// Holds out every `test_every`-th frame (1-based), never the first one.
pub fn frame_roles(n: usize, test_every: usize) -> Vec<FrameRole> {
    (0..n)
        .map(|i| {
            if test_every > 1 && i > 0 && (i + 1) % test_every == 0 {
                FrameRole::Test
            } else {
                FrameRole::Train
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame: usize,
    pub role: FrameRole,
    /// Pose objective at the predicted pose and at the returned pose.
    pub pose_objective_initial: f64,
    pub pose_objective: f64,
    /// Mean scene loss over the iterations that followed this frame.
    pub scene_loss: Option<f64>,
    pub gaussians: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountEvent {
    /// Global scene iteration at which the change happened.
    pub iteration: usize,
    pub cause: String,
    pub before: usize,
    pub after: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub frames: Vec<FrameLog>,
    pub count_events: Vec<CountEvent>,
    pub scene_iterations: usize,
    /// Sum of groups skipped because of non-finite gradients.
    pub skipped_updates: usize,
    /// Effective length unit of pose translation steps.
    pub translation_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cloud: GaussianCloud,
    /// One estimated world-to-camera pose per input frame.
    pub poses: Vec<PoseSE3>,
    pub roles: Vec<FrameRole>,
    pub log: RunLog,
}

/// Prior flow from frame `a` to frame `b > a`, chaining per-frame flows.
pub fn flow_between(seq: &Sequence, a: usize, b: usize) -> Result<Option<FlowField>> {
    let mut acc: Option<FlowField> = None;
    for i in a..b {
        let Some(f) = seq.frames[i].flow_forward.as_ref() else {
            return Ok(None);
        };
        acc = Some(match acc {
            None => f.clone(),
            Some(prev) => compose_flow(&prev, f)?,
        });
    }
    Ok(acc)
}

/// Normalized interpolation of rotation and camera centre.
pub fn interpolate_pose(a: &PoseSE3, b: &PoseSE3, s: f64) -> PoseSE3 {
    let qa = a.q();
    let mut qb = b.q();
    if quat_dot(&qa, &qb) < 0.0 {
        qb = qb.map(|v| -v);
    }
    let q = quat_normalize(&[0, 1, 2, 3].map(|i| (1.0 - s) * qa[i] + s * qb[i]));
    let c = a.camera_center() * (1.0 - s) + b.camera_center() * s;
    PoseSE3::new(q, -(quat_to_rotation(&q) * c))
}

/// Constant-velocity prediction for `frame` from posed frames `a < b`, with
/// the velocity scaled by the frame spacing when frames were skipped.
fn predict_across_gap(poses: &[Option<PoseSE3>], a: usize, b: usize, frame: usize) -> PoseSE3 {
    let (pa, pb) = (poses[a].as_ref().expect("posed"), poses[b].as_ref().expect("posed"));
    if frame - b == b - a {
        predict_pose_const_velocity(Some(pa), pb)
    } else {
        interpolate_pose(pa, pb, (frame - a) as f64 / (b - a) as f64)
    }
}

fn median_depth(depth: &DepthMap) -> Option<f64> {
    let mut v: Vec<f64> = depth.as_slice().iter().copied().filter(|d| *d > 0.0 && d.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let mid = v.len() / 2;
    Some(*v.select_nth_unstable_by(mid, f64::total_cmp).1)
}

/// Rendered depth normalized by accumulated opacity, zero where nothing was hit.
fn surface_depth(depth: &DepthMap, alpha: &DepthMap) -> DepthMap {
    Grid::from_fn(depth.width(), depth.height(), |x, y| {
        let a = *alpha.get(x, y);
        if a > 0.0 {
            depth.get(x, y) / a
        } else {
            0.0
        }
    })
}

struct Posed {
    frame: usize,
    /// Consistency mask in this frame's pixels, from the flow arriving here.
    rigid: Option<Mask>,
    /// Index into the posed list of the next posed frame and the flow to it.
    next: Option<(usize, FlowField)>,
}

struct Trainer<'a> {
    seq: &'a Sequence,
    cfg: &'a RunConfig,
    settings: RenderSettings,
    cloud: GaussianCloud,
    opt: SceneOptimizer,
    extent: f64,
    translation_scale: f64,
    rng: ChaCha8Rng,
    poses: Vec<Option<PoseSE3>>,
    posed: Vec<Posed>,
    log: RunLog,
    all_true: Mask,
}

impl Trainer<'_> {
    fn k(&self) -> &CameraIntrinsics {
        &self.seq.k
    }

    /// Pose `frame` from the latest posed frame `prev`, using the prior flow
    /// between them when available.
    fn pose_frame(&self, frame: usize, prev: &Posed, init: &PoseSE3, iters: usize) -> Result<(PoseSE3, f64, f64)> {
        let prev_pose = self.poses[prev.frame].as_ref().expect("posed");
        let flow = flow_between(self.seq, prev.frame, frame)?;
        let out = render_with(&self.cloud, prev_pose, self.k(), &self.settings)?;
        let source_depth = surface_depth(&out.depth, &out.alpha);
        let mut mask = visibility_map(&out, self.cfg.gamma);
        if let (true, Some(r)) = (self.cfg.use_rigid_mask, &prev.rigid) {
            mask = combine_mask(&mask, r)?;
        }
        let target = PoseTarget {
            frame,
            image: &self.seq.frames[frame].image,
            flow: flow.as_ref().map(|prior| FlowGuide {
                source_depth: &source_depth,
                source_pose: prev_pose,
                prior,
                mask: &mask,
            }),
        };
        let solver = PoseSolver::new(iters, self.cfg.lr_pose).with_translation_scale(self.translation_scale);
        let est = estimate_pose(&self.cloud, self.k(), &target, init, &solver, &self.cfg.weights, &self.settings)?;
        Ok((est.pose, est.initial_objective, est.objective))
    }

    fn scene_step(&mut self, view_idx: usize) -> Result<f64> {
        let p = &self.posed[view_idx];
        let frame = &self.seq.frames[p.frame];
        let pose = self.poses[p.frame].as_ref().expect("posed");
        let flow = p.next.as_ref().map(|(n, prior)| SceneFlow {
            next_pose: self.poses[self.posed[*n].frame].as_ref().expect("posed"),
            prior,
            rigid: self.posed[view_idx].rigid.as_ref().filter(|_| self.cfg.use_rigid_mask).unwrap_or(&self.all_true),
        });
        let view = SceneView {
            frame: p.frame,
            pose,
            image: &frame.image,
            prior_depth: frame.depth.as_ref(),
            flow,
        };
        let (loss, grads) = scene_objective_and_grad(&self.cloud, self.k(), &view, &self.cfg.weights, self.cfg.gamma, &self.settings)?;
        self.opt.accumulate_stats(&grads);
        let skipped = self.opt.step(&mut self.cloud, &grads);
        self.log.skipped_updates += skipped.len();
        self.log.scene_iterations += 1;
        let it = self.log.scene_iterations;
        if self.cfg.densify_every > 0 && it.is_multiple_of(self.cfg.densify_every) {
            let before = self.cloud.len();
            let report = self.opt.densify(
                &mut self.cloud,
                self.cfg.opacity_floor,
                self.cfg.grad_threshold,
                self.cfg.percent_dense * self.extent,
                &mut self.rng,
            );
            if self.cloud.len() != before || report.cloned + report.split + report.pruned > 0 {
                info!(
                    "iteration {it}: {before} -> {} Gaussians ({} cloned, {} split, {} pruned)",
                    self.cloud.len(),
                    report.cloned,
                    report.split,
                    report.pruned
                );
                self.log.count_events.push(CountEvent {
                    iteration: it,
                    cause: "densify_and_prune".into(),
                    before,
                    after: self.cloud.len(),
                    cloned: report.cloned,
                    split: report.split,
                    pruned: report.pruned,
                });
            }
        }
        Ok(loss.total)
    }

    fn scene_round(&mut self, iters: usize, only_first: bool) -> Result<Option<f64>> {
        if iters == 0 {
            return Ok(None);
        }
        let mut sum = 0.0;
        for _ in 0..iters {
            let idx = if only_first { 0 } else { self.rng.random_range(0..self.posed.len()) };
            sum += self.scene_step(idx)?;
        }
        Ok(Some(sum / iters as f64))
    }
}

/// Runs the full progressive reconstruction over `seq`.
pub fn reconstruct(seq: &Sequence, cfg: &RunConfig) -> Result<Reconstruction> {
    reconstruct_with(seq, cfg, &RenderSettings::default())
}

pub fn reconstruct_with(seq: &Sequence, cfg: &RunConfig, settings: &RenderSettings) -> Result<Reconstruction> {
    cfg.validate()?;
    seq.validate()?;
    let roles = frame_roles(seq.len(), cfg.test_every);
    let train: Vec<usize> = (0..seq.len()).filter(|i| roles[*i] == FrameRole::Train).collect();
    if train.len() < 2 {
        return Err(Error::TooFewFrames {
            required: 2,
            actual: train.len(),
        });
    }
    let first = &seq.frames[0];
    let depth0 = first.depth.as_ref().ok_or(Error::EmptyInit)?;
    let identity = PoseSE3::identity();
    let cloud = init_from_depth(&first.image, depth0, &identity, &seq.k, cfg.init_stride, cfg.sh_degree, cfg.init_opacity)?;
    let extent = cloud.extent().max(1e-6);
    let translation_scale = match cfg.pose_translation_scale {
        Some(v) => v,
        None => 2.0 * median_depth(depth0).ok_or(Error::EmptyInit)?,
    };
    info!("initialized {} Gaussians from frame 0 (extent {extent:.4})", cloud.len());
    let (w, h) = seq.k.dims();
    let mut t = Trainer {
        seq,
        cfg,
        settings: *settings,
        opt: SceneOptimizer::new(&cloud, &cfg.scene_lr, extent),
        cloud,
        extent,
        translation_scale,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        poses: vec![None; seq.len()],
        posed: Vec::new(),
        log: RunLog::default(),
        all_true: Grid::filled(w, h, true),
    };
    t.poses[0] = Some(identity);
    t.posed.push(Posed {
        frame: 0,
        rigid: None,
        next: None,
    });
    let init_loss = t.scene_round(cfg.init_iters, true)?;
    t.log.frames.push(FrameLog {
        frame: 0,
        role: FrameRole::Train,
        pose_objective_initial: 0.0,
        pose_objective: 0.0,
        scene_loss: init_loss,
        gaussians: t.cloud.len(),
    });

    for j in 1..train.len() {
        let frame = train[j];
        let prev_pose = t.poses[train[j - 1]].expect("posed");
        let init = if j >= 2 {
            predict_across_gap(&t.poses, train[j - 2], train[j - 1], frame)
        } else {
            predict_pose_const_velocity(None, &prev_pose)
        };
        let last = t.posed.last().expect("non-empty");
        let (pose, obj0, obj) = t.pose_frame(frame, last, &init, cfg.iters_pose)?;
        let prev_idx = t.posed.len() - 1;
        let prev_frame = t.posed[prev_idx].frame;
        let flow = flow_between(seq, prev_frame, frame)?;
        let rigid = match (&flow, cfg.use_rigid_mask) {
            (Some(f), true) => Some(rigid_mask(f, &prev_pose, &pose, &seq.k, cfg.beta)),
            _ => None,
        };
        if let Some(r) = &rigid {
            let kept = r.as_slice().iter().filter(|v| **v).count();
            debug!("frame {frame}: rigid mask keeps {kept} of {} pixels", r.len());
        }
        t.poses[frame] = Some(pose);
        t.posed[prev_idx].next = flow.map(|f| (prev_idx + 1, f));
        t.posed.push(Posed { frame, rigid, next: None });
        let scene_loss = t.scene_round(cfg.iters_scene, false)?;
        info!(
            "frame {frame}: pose objective {obj0:.5} -> {obj:.5}, scene loss {:.5}, {} Gaussians",
            scene_loss.unwrap_or(f64::NAN),
            t.cloud.len()
        );
        t.log.frames.push(FrameLog {
            frame,
            role: FrameRole::Train,
            pose_objective_initial: obj0,
            pose_objective: obj,
            scene_loss,
            gaussians: t.cloud.len(),
        });
    }

    // Held-out frames: posed against the frozen scene from the closest
    // earlier posed frame.
    for frame in (0..seq.len()).filter(|i| roles[*i] == FrameRole::Test) {
        let before = train.iter().rposition(|i| *i < frame).expect("frame 0 is always trained");
        let a = train[before];
        let init = match train.get(before + 1) {
            Some(&b) => {
                let s = (frame - a) as f64 / (b - a) as f64;
                interpolate_pose(t.poses[a].as_ref().expect("posed"), t.poses[b].as_ref().expect("posed"), s)
            }
            None if before > 0 => predict_across_gap(&t.poses, train[before - 1], a, frame),
            None => t.poses[a].expect("posed"),
        };
        let anchor_idx = t.posed.iter().position(|p| p.frame == a).expect("trained frames are posed");
        let anchor = &t.posed[anchor_idx];
        let (pose, obj0, obj) = t.pose_frame(frame, anchor, &init, cfg.iters_test_pose)?;
        info!("held-out frame {frame}: pose objective {obj0:.5} -> {obj:.5}");
        t.poses[frame] = Some(pose);
        t.log.frames.push(FrameLog {
            frame,
            role: FrameRole::Test,
            pose_objective_initial: obj0,
            pose_objective: obj,
            scene_loss: None,
            gaussians: t.cloud.len(),
        });
    }

    let poses: Vec<PoseSE3> = t.poses.into_iter().map(|p| p.expect("every frame posed")).collect();
    if let Some(bad) = poses.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss { frame: bad });
    }
    t.log.translation_scale = translation_scale;
    Ok(Reconstruction {
        cloud: t.cloud,
        poses,
        roles,
        log: t.log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameQuality {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvsMetrics {
    pub frames: Vec<FrameQuality>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// PSNR and SSIM of renders at `poses` against the images of `frames`.
/// Renders are rounded to 8 bits first, like the stored frames.
pub fn evaluate_nvs(cloud: &GaussianCloud, seq: &Sequence, poses: &[PoseSE3], frames: &[usize]) -> Result<NvsMetrics> {
    if poses.len() != seq.len() {
        return Err(Error::LengthMismatch(poses.len(), seq.len()));
    }
    let scores: Vec<FrameQuality> = frames
        .par_iter()
        .map(|&i| {
            let out = render_with(cloud, &poses[i], &seq.k, &RenderSettings::default())?;
            let color = quantize_u8(&out.color);
            let img = &seq.frames[i].image;
            Ok(FrameQuality {
                frame: i,
                psnr: psnr(&color, img)?,
                ssim: ssim(&color, img)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = scores.len().max(1) as f64;
    Ok(NvsMetrics {
        mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        frames: scores,
    })
}
