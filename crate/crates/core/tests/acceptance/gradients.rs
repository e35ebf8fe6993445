//! Analytic gradients against central finite differences for every parameter
//! class under each training loss.
//!
//! A perturbation is only compared when it keeps the loss on the same smooth
//! branch: the same splats touch the same pixels in the same order with the
//! same alpha clamping, and no L1 residual changes sign.

use std::collections::BTreeSet;
use std::fmt;

use flowsplat::flow::{projection_flow, projection_flow_vjp, FlowField};
use flowsplat::geometry::{quat_norm, CameraIntrinsics, PoseSE3};
use flowsplat::grid::{DepthMap, Grid, Mask, RgbImage};
use flowsplat::losses::{align_scale_shift, depth_loss, flow_loss, photometric_loss, LossWeights};
use flowsplat::optimizer::{pose_objective_and_grad, FlowGuide, PoseParams, PoseTarget};
use flowsplat::rasterizer::{render_backward, render_with, RenderOutput, RenderSettings, SceneGradients};
use flowsplat::scene::GaussianCloud;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scenes::{intrinsics, random_cloud, random_pose, SceneSpec};

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;
const LAMBDA_DSSIM: f64 = 0.2;
/// Raw pose quaternions are stored at this norm to exercise normalization.
const RAW_Q_NORM: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Class {
    Mean,
    Rotation,
    LogScale,
    Opacity,
    Sh,
    PoseQ,
    PoseT,
}

pub const CLASSES: [Class; 7] = [
    Class::Mean,
    Class::Rotation,
    Class::LogScale,
    Class::Opacity,
    Class::Sh,
    Class::PoseQ,
    Class::PoseT,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Loss {
    Photometric,
    Flow,
    Depth,
}

pub const LOSSES: [Loss; 3] = [Loss::Photometric, Loss::Flow, Loss::Depth];

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let s = match self {
            Class::Mean => "mean",
            Class::Rotation => "rotation",
            Class::LogScale => "log_scale",
            Class::Opacity => "opacity_logit",
            Class::Sh => "sh",
            Class::PoseQ => "pose_q",
            Class::PoseT => "pose_t",
        };
        f.pad(s)
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let s = match self {
            Loss::Photometric => "photometric",
            Loss::Flow => "flow",
            Loss::Depth => "depth",
        };
        f.pad(s)
    }
}

/// Outcome for one (loss, class) pair across all seeds.
#[derive(Debug, Default, Clone)]
pub struct Tally {
    pub compared: usize,
    pub skipped: usize,
    /// Seeds with at least one compared entry.
    pub seeds: BTreeSet<u64>,
    /// Compared entries whose gradient exceeds the absolute floor.
    pub nontrivial: usize,
    pub failures: usize,
    pub max_rel: f64,
    pub worst: Option<String>,
}

pub fn agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR.max(REL_TOL * analytic.abs().max(numeric.abs()))
}

struct Problem {
    cloud: GaussianCloud,
    k: CameraIntrinsics,
    /// View rendered by every loss; the flow source for the flow loss.
    pose: PoseSE3,
    /// Frame the flow points into; the pose variable of the flow loss.
    pose_next: PoseSE3,
    target: RgbImage,
    prior_depth: DepthMap,
    depth_valid: Mask,
    prior_flow: FlowField,
    flow_mask: Mask,
    /// Rendered depth at `pose` for the unperturbed cloud.
    source_depth: DepthMap,
}

fn settings() -> RenderSettings {
    RenderSettings::default()
}

fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ad_0000 + seed);
    let k = intrinsics(20, 16, 18.0);
    let pose = random_pose(&mut rng, 10.0, 0.2);
    let spec = SceneSpec {
        count: 18,
        sh_degree: 1 + (seed % 3) as usize,
        depth: (2.0, 3.5),
        spread: 0.45,
        log_scale: (-1.9, -1.2),
        opacity: (0.4, 0.9),
        stray: 0.0,
        sh_rest: 0.05,
    };
    let cloud = random_cloud(&mut rng, &spec, &pose);
    let delta = random_pose(&mut rng, 3.0, 0.1);
    let pose_next = delta.compose(&pose);
    let out = render_with(&cloud, &pose, &k, &settings()).expect("render");
    let noise = Normal::new(0.0, 0.1).unwrap();
    let target = out.color.map(|c| c.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    let depth_valid = out.alpha.map(|a| *a > 0.5);
    let prior_depth = Grid::from_fn(20, 16, |x, y| {
        let d = *out.depth.get(x, y);
        if *depth_valid.get(x, y) {
            1.3 * d + 0.2 + rng.random_range(-0.05..0.05)
        } else {
            0.0
        }
    });
    let mut prior_flow = projection_flow(&out.depth, &pose, &pose_next, &k);
    let flow_noise = Normal::new(0.0, 0.3).unwrap();
    for uv in prior_flow.uv.as_mut_slice() {
        uv[0] += flow_noise.sample(&mut rng);
        uv[1] += flow_noise.sample(&mut rng);
    }
    Problem {
        // Flow is only supervised where the source render is opaque, as in training.
        flow_mask: out.alpha.map(|a| *a > 0.9),
        source_depth: out.depth.clone(),
        cloud,
        k,
        pose,
        pose_next,
        target,
        prior_depth,
        depth_valid,
        prior_flow,
    }
}

fn hash_signs(mut hash: u64, values: impl Iterator<Item = f64>) -> u64 {
    for v in values {
        hash ^= (v > 0.0) as u64 + 2 * (v < 0.0) as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Signs of the depth residuals after scale and shift alignment.
fn depth_branch(rendered: &DepthMap, p: &Problem) -> u64 {
    let idx: Vec<usize> = (0..rendered.len())
        .filter(|&i| {
            let q = p.prior_depth.as_slice()[i];
            p.depth_valid.as_slice()[i] && q > 0.0 && q.is_finite()
        })
        .collect();
    let r: Vec<f64> = idx.iter().map(|&i| rendered.as_slice()[i]).collect();
    let q: Vec<f64> = idx.iter().map(|&i| p.prior_depth.as_slice()[i]).collect();
    let (s, b) = align_scale_shift(&r, &q);
    hash_signs(0, r.iter().zip(&q).map(|(r, q)| r - s * q - b))
}

fn photometric_branch(out: &RenderOutput, p: &Problem) -> u64 {
    let residuals = out
        .color
        .as_slice()
        .iter()
        .zip(p.target.as_slice())
        .flat_map(|(a, b)| (0..3).map(move |c| a[c] - b[c]));
    hash_signs(out.contribution_signature(), residuals)
}

/// Loss value of the scene at `p.pose` and a hash of its smooth branch.
fn scene_value(loss: Loss, cloud: &GaussianCloud, p: &Problem) -> (f64, u64) {
    let out = render_with(cloud, &p.pose, &p.k, &settings()).expect("render");
    match loss {
        Loss::Photometric => {
            let (v, _) = photometric_loss(&out.color, &p.target, LAMBDA_DSSIM).unwrap();
            (v, photometric_branch(&out, p))
        }
        Loss::Depth => {
            let (v, _) = depth_loss(&out.depth, &p.prior_depth, &p.depth_valid).unwrap();
            (v, out.contribution_signature() ^ depth_branch(&out.depth, p))
        }
        Loss::Flow => {
            let proj = projection_flow(&out.depth, &p.pose, &p.pose_next, &p.k);
            let (v, _) = flow_loss(&proj, &p.prior_flow, &p.flow_mask).unwrap();
            (v, hash_signs(out.contribution_signature(), proj.valid.as_slice().iter().map(|b| *b as u8 as f64)))
        }
    }
}

fn scene_grad(loss: Loss, p: &Problem) -> SceneGradients {
    let (w, h) = p.k.dims();
    let out = render_with(&p.cloud, &p.pose, &p.k, &settings()).expect("render");
    let zero_color = Grid::filled(w, h, [0.0; 3]);
    match loss {
        Loss::Photometric => {
            let (_, g) = photometric_loss(&out.color, &p.target, LAMBDA_DSSIM).unwrap();
            render_backward(&p.cloud, &p.pose, &p.k, &out, &g, None, None).unwrap()
        }
        Loss::Depth => {
            let (_, g) = depth_loss(&out.depth, &p.prior_depth, &p.depth_valid).unwrap();
            render_backward(&p.cloud, &p.pose, &p.k, &out, &zero_color, Some(&g), None).unwrap()
        }
        Loss::Flow => {
            let proj = projection_flow(&out.depth, &p.pose, &p.pose_next, &p.k);
            let (_, g) = flow_loss(&proj, &p.prior_flow, &p.flow_mask).unwrap();
            let vjp = projection_flow_vjp(&out.depth, &p.pose, &p.pose_next, &p.k, &g).unwrap();
            render_backward(&p.cloud, &p.pose, &p.k, &out, &zero_color, Some(&vjp.depth), None).unwrap()
        }
    }
}

fn cloud_len(class: Class, cloud: &GaussianCloud) -> usize {
    match class {
        Class::Mean | Class::LogScale => 3 * cloud.len(),
        Class::Rotation => 4 * cloud.len(),
        Class::Opacity => cloud.len(),
        Class::Sh => 3 * cloud.sh.len(),
        Class::PoseQ | Class::PoseT => 0,
    }
}

fn cloud_entry(class: Class, cloud: &mut GaussianCloud, j: usize) -> &mut f64 {
    match class {
        Class::Mean => &mut cloud.positions[j / 3][j % 3],
        Class::Rotation => &mut cloud.rotations[j / 4][j % 4],
        Class::LogScale => &mut cloud.log_scales[j / 3][j % 3],
        Class::Opacity => &mut cloud.opacity_logits[j],
        Class::Sh => &mut cloud.sh[j / 3][j % 3],
        Class::PoseQ | Class::PoseT => unreachable!("pose entries live outside the cloud"),
    }
}

fn grad_entry(class: Class, g: &SceneGradients, j: usize) -> f64 {
    match class {
        Class::Mean => g.positions[j / 3][j % 3],
        Class::Rotation => g.rotations[j / 4][j % 4],
        Class::LogScale => g.log_scales[j / 3][j % 3],
        Class::Opacity => g.opacity_logits[j],
        Class::Sh => g.sh[j / 3][j % 3],
        Class::PoseQ | Class::PoseT => unreachable!("pose entries live outside the cloud"),
    }
}

fn record(tally: &mut Tally, seed: u64, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
    tally.compared += 1;
    tally.seeds.insert(seed);
    let scale = analytic.abs().max(numeric.abs());
    if scale > ABS_FLOOR {
        tally.nontrivial += 1;
        let rel = (analytic - numeric).abs() / scale;
        if rel > tally.max_rel {
            tally.max_rel = rel;
            tally.worst = Some(format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", what()));
        }
    }
    if !agrees(analytic, numeric) {
        tally.failures += 1;
    }
}

fn check_cloud(loss: Loss, class: Class, seed: u64, p: &Problem, analytic: &SceneGradients, tally: &mut Tally) {
    let (_, base) = scene_value(loss, &p.cloud, p);
    for j in 0..cloud_len(class, &p.cloud) {
        let mut plus = p.cloud.clone();
        *cloud_entry(class, &mut plus, j) += STEP;
        let mut minus = p.cloud.clone();
        *cloud_entry(class, &mut minus, j) -= STEP;
        let (fp, sp) = scene_value(loss, &plus, p);
        let (fm, sm) = scene_value(loss, &minus, p);
        if sp != base || sm != base {
            tally.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        record(tally, seed, || format!("seed {seed} entry {j}"), grad_entry(class, analytic, j), numeric);
    }
}

fn raw_params(pose: &PoseSE3) -> PoseParams {
    let mut params = PoseParams::from_pose(pose);
    params.q = params.q.map(|v| v * RAW_Q_NORM);
    params
}

/// Pose objective value, gradient with respect to raw `(q, t)`, and branch hash.
fn pose_eval(loss: Loss, p: &Problem, params: &PoseParams) -> (f64, [f64; 7], u64) {
    match loss {
        Loss::Photometric | Loss::Flow => {
            let flow = loss == Loss::Flow;
            let weights = LossWeights {
                lambda_dssim: LAMBDA_DSSIM,
                lambda_rgb: if flow { 0.0 } else { 1.0 },
                lambda_flow: if flow { 1.0 } else { 0.0 },
                lambda_depth: 0.0,
            };
            let target = PoseTarget {
                frame: 1,
                image: &p.target,
                flow: flow.then_some(FlowGuide {
                    source_depth: &p.source_depth,
                    source_pose: &p.pose,
                    prior: &p.prior_flow,
                    mask: &p.flow_mask,
                }),
            };
            let (v, g) = pose_objective_and_grad(&p.cloud, &p.k, &target, params, &weights, &settings()).unwrap();
            let branch = if flow {
                let proj = projection_flow(&p.source_depth, &p.pose, &params.pose(), &p.k);
                hash_signs(0, proj.valid.as_slice().iter().map(|b| *b as u8 as f64))
            } else {
                let out = render_with(&p.cloud, &params.pose(), &p.k, &settings()).unwrap();
                photometric_branch(&out, p)
            };
            (v, g, branch)
        }
        Loss::Depth => {
            let pose = params.pose();
            let out = render_with(&p.cloud, &pose, &p.k, &settings()).unwrap();
            let (v, g) = depth_loss(&out.depth, &p.prior_depth, &p.depth_valid).unwrap();
            let zero_color = Grid::filled(p.k.width, p.k.height, [0.0; 3]);
            let sg = render_backward(&p.cloud, &pose, &p.k, &out, &zero_color, Some(&g), None).unwrap();
            let inv = 1.0 / quat_norm(&params.q);
            let grad = [
                sg.pose_q[0] * inv,
                sg.pose_q[1] * inv,
                sg.pose_q[2] * inv,
                sg.pose_q[3] * inv,
                sg.pose_t.x,
                sg.pose_t.y,
                sg.pose_t.z,
            ];
            (v, grad, out.contribution_signature() ^ depth_branch(&out.depth, p))
        }
    }
}

fn check_pose(loss: Loss, seed: u64, p: &Problem, tallies: &mut [(Loss, Class, Tally)]) {
    // The flow loss varies the frame the flow points into; the others vary the rendered view.
    let pose = if loss == Loss::Flow { &p.pose_next } else { &p.pose };
    let params = raw_params(pose);
    let (_, analytic, base) = pose_eval(loss, p, &params);
    for j in 0..7 {
        let class = if j < 4 { Class::PoseQ } else { Class::PoseT };
        let shifted = |d: f64| {
            let mut q = params;
            if j < 4 {
                q.q[j] += d;
            } else {
                q.t += Vector3::ith(j - 4, d);
            }
            q
        };
        let (fp, _, sp) = pose_eval(loss, p, &shifted(STEP));
        let (fm, _, sm) = pose_eval(loss, p, &shifted(-STEP));
        let tally = tallies
            .iter_mut()
            .find(|(l, c, _)| *l == loss && *c == class)
            .map(|(_, _, t)| t)
            .unwrap();
        if sp != base || sm != base {
            tally.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        record(tally, seed, || format!("seed {seed} component {j}"), analytic[j], numeric);
    }
}

/// Runs every (loss, class) pair over `seeds` random problems.
pub fn run(seeds: u64) -> Vec<(Loss, Class, Tally)> {
    let mut tallies: Vec<(Loss, Class, Tally)> = LOSSES
        .iter()
        .flat_map(|&l| CLASSES.iter().map(move |&c| (l, c, Tally::default())))
        .collect();
    for seed in 0..seeds {
        let p = problem(seed);
        for loss in LOSSES {
            let analytic = scene_grad(loss, &p);
            for (l, c, tally) in tallies.iter_mut() {
                if *l == loss && !matches!(c, Class::PoseQ | Class::PoseT) {
                    check_cloud(loss, *c, seed, &p, &analytic, tally);
                }
            }
            check_pose(loss, seed, &p, &mut tallies);
        }
    }
    tallies
}
