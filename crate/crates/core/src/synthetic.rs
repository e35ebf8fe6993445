//! Procedural test sequences: a textured surface patch made of flat
//! Gaussians, a smooth camera sweep, rendered frames, depth priors and flow
//! priors derived from the ground-truth geometry, with optional affine depth
//! errors and off-epipolar flow outliers.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameData, Sequence};
use crate::error::{Error, Result};
use crate::flow::{projection_flow, FlowField};
use crate::formats::quantize_u8;
use crate::geometry::{
    fundamental_from_poses, rotation_to_quat, CameraIntrinsics, FundamentalMatrix, PoseSE3,
};
use crate::grid::{DepthMap, Grid, Mask};
use crate::rasterizer::naive_render;
use crate::scene::{logit, Gaussian, GaussianCloud};
use crate::sh::rgb_to_dc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Random multi-frequency colour pattern.
    Textured,
    /// Uniform albedo under a mild horizontal lighting gradient.
    LowTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Approximate number of Gaussians on the surface.
    pub gaussians: usize,
    pub texture: Texture,
    /// Mean distance of the surface from the first camera.
    pub surface_depth: f64,
    /// Amplitude of the surface relief.
    pub relief: f64,
    /// Sideways camera travel per frame.
    pub step: f64,
    /// Vertical and depth excursion relative to half the sideways travel.
    pub bob: f64,
    /// Depth of the point every camera looks at.
    pub look_at_depth: f64,
    /// Depth priors are `depth_scale * depth + depth_shift` on valid pixels.
    pub depth_scale: f64,
    pub depth_shift: f64,
    /// Share of flow pixels replaced by off-epipolar outliers.
    pub outlier_fraction: f64,
    /// Outlier displacement perpendicular to the epipolar line, in pixels.
    pub outlier_magnitude: f64,
    /// Number of outlier patches sharing the outlier pixel budget.
    pub outlier_patches: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frames: 20,
            width: 80,
            height: 60,
            focal: 40.0,
            gaussians: 5000,
            texture: Texture::Textured,
            surface_depth: 3.0,
            relief: 0.5,
            step: 0.04,
            bob: 0.3,
            look_at_depth: 6.0,
            depth_scale: 1.0,
            depth_shift: 0.0,
            outlier_fraction: 0.0,
            outlier_magnitude: 6.0,
            outlier_patches: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic scene: {m}")));
        if self.frames < 2 {
            return bad("needs at least 2 frames");
        }
        if self.width < 8 || self.height < 8 || !(self.focal > 0.0) {
            return bad("image must be at least 8x8 with positive focal length");
        }
        if self.gaussians < 16 {
            return bad("needs at least 16 Gaussians");
        }
        if !(self.surface_depth > 4.0 * self.relief) || self.relief < 0.0 {
            return bad("relief must be non-negative and well below the surface depth");
        }
        if !self.step.is_finite() || !self.bob.is_finite() || !(self.look_at_depth > self.surface_depth) {
            return bad("trajectory parameters must be finite and look beyond the surface");
        }
        if !(self.depth_scale > 0.0) || !self.depth_shift.is_finite() {
            return bad("depth scale must be positive");
        }
        if !(0.0..=0.5).contains(&self.outlier_fraction) || !(self.outlier_magnitude >= 0.0) || self.outlier_patches == 0 {
            return bad("outlier fraction must lie in [0, 0.5] with at least one patch");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("synthetic config is always serializable")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub sequence: Sequence,
    pub gt_poses: Vec<PoseSE3>,
    pub gt_cloud: GaussianCloud,
    /// Exact (unperturbed) depth per frame.
    pub gt_depths: Vec<DepthMap>,
    /// Uncorrupted flow per frame pair.
    pub clean_flows: Vec<FlowField>,
    /// Source pixels whose prior flow was replaced by an outlier, per frame pair.
    pub outlier_masks: Vec<Mask>,
}

/// Smallest alpha at which a rendered pixel counts as covered by the surface.
const COVERAGE_ALPHA: f64 = 0.5;

fn surface_height(cfg: &SynthConfig, x: f64, y: f64) -> f64 {
    cfg.surface_depth + cfg.relief * ((1.3 * x + 0.5).sin() * (1.1 * y).cos() + 0.5 * (2.7 * x - 1.9 * y).sin())
}

fn surface_normal(cfg: &SynthConfig, x: f64, y: f64) -> Vector3<f64> {
    let r = cfg.relief;
    let dzdx = r * (1.3 * (1.3 * x + 0.5).cos() * (1.1 * y).cos() + 0.5 * 2.7 * (2.7 * x - 1.9 * y).cos());
    let dzdy = r * (-1.1 * (1.3 * x + 0.5).sin() * (1.1 * y).sin() - 0.5 * 1.9 * (2.7 * x - 1.9 * y).cos());
    // Facing the cameras, which look along +z.
    Vector3::new(dzdx, dzdy, -1.0).normalize()
}

struct Pattern {
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Pattern {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..6)
            .map(|_| {
                let freq = rng.random_range(2.0..9.0);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                ([freq * angle.cos(), freq * angle.sin()], rng.random_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        Self { waves }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = [0.5; 3];
        for (dir, phase, amp) in &self.waves {
            let s = (dir[0] * x + dir[1] * y + phase).sin();
            for ch in 0..3 {
                c[ch] += 0.07 * amp[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.05, 0.95))
    }
}

fn build_surface(cfg: &SynthConfig, half_x: f64, half_y: f64, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let nx = ((cfg.gaussians as f64 * half_x / half_y).sqrt().round() as usize).max(4);
    let ny = (cfg.gaussians / nx).max(4);
    let sx = 2.0 * half_x / (nx - 1) as f64;
    let sy = 2.0 * half_y / (ny - 1) as f64;
    let pattern = Pattern::random(rng);
    let albedo = [0.8, 0.45, 0.4];
    let mut cloud = GaussianCloud::new(0);
    for j in 0..ny {
        for i in 0..nx {
            let x = -half_x + i as f64 * sx;
            let y = -half_y + j as f64 * sy;
            let n = surface_normal(cfg, x, y);
            let t1 = (Vector3::x() - n * n.x).normalize();
            let t2 = n.cross(&t1);
            let rot = Matrix3::from_columns(&[t1, t2, n]);
            let color = match cfg.texture {
                Texture::Textured => pattern.color(x, y),
                Texture::LowTexture => {
                    let light = 0.85 + 0.15 * x / half_x;
                    albedo.map(|a| a * light)
                }
            };
            cloud.push(Gaussian {
                position: [x, y, surface_height(cfg, x, y)],
                rotation: rotation_to_quat(&rot),
                log_scale: [(0.6 * sx).ln(), (0.6 * sy).ln(), (0.08 * sx.min(sy)).ln()],
                opacity_logit: logit(0.9),
                sh: vec![rgb_to_dc(color)],
            });
        }
    }
    cloud
}

/// World-to-camera poses of a smooth arc across the surface. The camera
/// centre advances `step` per frame sideways, with a gentle vertical and
/// depth oscillation, and every camera looks at a point `look_at_depth` in
/// front of the starting plane, so the views keep overlapping.
pub fn camera_trajectory(cfg: &SynthConfig) -> Vec<PoseSE3> {
    let n = cfg.frames;
    let mid = (n - 1) as f64 / 2.0;
    let target = Vector3::new(0.0, 0.0, cfg.look_at_depth);
    (0..n)
        .map(|i| {
            let phase = std::f64::consts::PI * i as f64 / (n - 1) as f64;
            let span = cfg.step * mid;
            let center = Vector3::new(
                cfg.step * (i as f64 - mid),
                cfg.bob * span * (phase.sin() - 0.5),
                cfg.bob * span * 0.5 * (2.0 * phase).sin(),
            );
            let forward = (target - center).normalize();
            let right = Vector3::y().cross(&forward).normalize();
            let down = forward.cross(&right);
            let r_wc = nalgebra::Matrix3::from_columns(&[right, down, forward]);
            PoseSE3::from_camera_to_world(&r_wc, &center)
        })
        .collect()
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// A square region whose prior flow is corrupted. It travels with its own
/// corrupted flow, like a transient object the flow estimator tracks, so the
/// outliers of consecutive frame pairs line up.
struct OutlierPatch {
    corner: Vector2<f64>,
    sign: f64,
}

fn place_patches(count: usize, side: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<OutlierPatch> {
    (0..count)
        .map(|_| OutlierPatch {
            corner: Vector2::new(rng.random_range(0..=w - side) as f64, rng.random_range(0..=h - side) as f64),
            sign: if rng.random::<bool>() { 1.0 } else { -1.0 },
        })
        .collect()
}

fn epipolar_normal(f: &FundamentalMatrix, x: f64, y: f64) -> Option<Vector2<f64>> {
    let line = f.f * Vector3::new(x, y, 1.0);
    let n = Vector2::new(line.x, line.y);
    (n.norm() > 0.0).then(|| n / n.norm())
}

/// Pushes the flow inside every patch off its epipolar line by
/// `outlier_magnitude` pixels and moves the patches along. Returns the
/// corrupted source pixels.
fn inject_outliers(
    cfg: &SynthConfig,
    side: usize,
    patches: &mut [OutlierPatch],
    flow: &mut FlowField,
    a: &PoseSE3,
    b: &PoseSE3,
    k: &CameraIntrinsics,
) -> Mask {
    let (w, h) = flow.dims();
    let mut mask = Grid::filled(w, h, false);
    let Ok(f) = fundamental_from_poses(a, b, k) else {
        return mask;
    };
    let max = Vector2::new((w - side) as f64, (h - side) as f64);
    let inside = |c: &Vector2<f64>| c.x >= 0.0 && c.y >= 0.0 && c.x <= max.x && c.y <= max.y;
    for patch in patches.iter_mut() {
        let x0 = (patch.corner.x.round() as usize).min(w - side);
        let y0 = (patch.corner.y.round() as usize).min(h - side);
        let (cx, cy) = (x0 + side / 2, y0 + side / 2);
        let Some(n) = epipolar_normal(&f, cx as f64, cy as f64) else { continue };
        let rigid = *flow.uv.get(cx, cy);
        let step = |s: f64| patch.corner + Vector2::new(rigid[0], rigid[1]) + n * (s * cfg.outlier_magnitude);
        let sign = if inside(&step(patch.sign)) || !inside(&step(-patch.sign)) { patch.sign } else { -patch.sign };
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                if !*flow.valid.get(x, y) {
                    continue;
                }
                let Some(nx) = epipolar_normal(&f, x as f64, y as f64) else { continue };
                let uv = flow.uv.get_mut(x, y);
                uv[0] = f32_exact(uv[0] + sign * cfg.outlier_magnitude * nx.x);
                uv[1] = f32_exact(uv[1] + sign * cfg.outlier_magnitude * nx.y);
                *mask.get_mut(x, y) = true;
            }
        }
        let next = step(sign);
        patch.corner = Vector2::new(next.x.clamp(0.0, max.x), next.y.clamp(0.0, max.y));
        patch.sign = -sign;
    }
    mask
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = CameraIntrinsics::new(
        cfg.focal,
        cfg.focal,
        (cfg.width as f64 - 1.0) / 2.0,
        (cfg.height as f64 - 1.0) / 2.0,
        cfg.width,
        cfg.height,
    )?;
    let poses = camera_trajectory(cfg);
    // Cover every view with margin: frustum half-extent plus camera excursion.
    let far = cfg.surface_depth + cfg.relief * 1.5;
    let mut half_x: f64 = 0.0;
    let mut half_y: f64 = 0.0;
    for p in &poses {
        let c = p.camera_center();
        let r_wc = p.rotation().transpose();
        for (u, v) in [(0.0, 0.0), (cfg.width as f64, 0.0), (0.0, cfg.height as f64), (cfg.width as f64, cfg.height as f64)] {
            let ray = r_wc * k.ray(Vector2::new(u, v));
            let hit = c + ray * ((far - c.z) / ray.z);
            half_x = half_x.max(hit.x.abs());
            half_y = half_y.max(hit.y.abs());
        }
    }
    let gt_cloud = build_surface(cfg, half_x * 1.1, half_y * 1.1, &mut rng);

    let mut images = Vec::with_capacity(cfg.frames);
    let mut gt_depths = Vec::with_capacity(cfg.frames);
    for p in &poses {
        let out = naive_render(&gt_cloud, p, &k)?;
        images.push(quantize_u8(&out.color));
        let depth = Grid::from_fn(cfg.width, cfg.height, |x, y| {
            let a = *out.alpha.get(x, y);
            if a > COVERAGE_ALPHA {
                f32_exact(*out.depth.get(x, y) / a)
            } else {
                0.0
            }
        });
        gt_depths.push(depth);
    }

    let side = ((cfg.outlier_fraction * (cfg.width * cfg.height) as f64 / cfg.outlier_patches as f64).sqrt().round() as usize)
        .clamp(1, cfg.width.min(cfg.height));
    let mut patches = if cfg.outlier_fraction > 0.0 {
        place_patches(cfg.outlier_patches, side, cfg.width, cfg.height, &mut rng)
    } else {
        Vec::new()
    };
    let mut clean_flows = Vec::with_capacity(cfg.frames - 1);
    let mut outlier_masks = Vec::with_capacity(cfg.frames - 1);
    let mut frames = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let flow_forward = if i + 1 < cfg.frames {
            let mut f = projection_flow(&gt_depths[i], &poses[i], &poses[i + 1], &k);
            f.uv.as_mut_slice().iter_mut().for_each(|v| *v = v.map(f32_exact));
            clean_flows.push(f.clone());
            outlier_masks.push(inject_outliers(cfg, side, &mut patches, &mut f, &poses[i], &poses[i + 1], &k));
            Some(f)
        } else {
            None
        };
        let prior = gt_depths[i].map(|d| {
            if *d > 0.0 {
                (cfg.depth_scale * d + cfg.depth_shift).max(0.0)
            } else {
                0.0
            }
        });
        frames.push(FrameData {
            image: images[i].clone(),
            depth: Some(prior),
            flow_forward,
        });
    }
    Ok(SyntheticData {
        sequence: Sequence {
            k,
            frames,
            gt_poses: Some(poses.clone()),
        },
        gt_poses: poses,
        gt_cloud,
        gt_depths,
        clean_flows,
        outlier_masks,
    })
}
