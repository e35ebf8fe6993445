//! Depth-sorted alpha compositing of projected Gaussians.
//!
//! `render` bins splats into square tiles and composites each tile
//! independently; `naive_render` walks every splat for every pixel and is kept
//! as the reference the tiled path is checked against. `render_backward`
//! returns exact gradients of the composited colour, depth and accumulated
//! alpha with respect to all cloud parameters and the camera pose.
//!
//! Per pixel, with splats in front-to-back order and `T_i = Π_{j<i} (1 - α_j)`:
//!
//! ```text
//! C = Σ c_i α_i T_i      D = Σ d_i α_i T_i      A = Σ α_i T_i = 1 - T_final
//! ```
//!
//! Depth is not normalized by `A`.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{normalize_vjp, quat_normalize, quat_to_rotation, rotation_vjp, CameraIntrinsics, PoseSE3, Quat};
use crate::grid::{DepthMap, Grid, Mask, RgbImage};
use crate::scene::{build_covariance, perspective_jacobian, project_with_rotation, GaussianCloud, ProjectedGaussian};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub z_near: f64,
    pub tile_size: usize,
    /// Stop compositing a pixel once its transmittance drops below
    /// `transmittance_cutoff`. Off by default: the skipped tail can be as large
    /// as `cutoff * value`, which breaks agreement with the full product.
    pub early_termination: bool,
    pub transmittance_cutoff: f64,
    pub alpha_max: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            z_near: crate::geometry::Z_NEAR,
            tile_size: 16,
            early_termination: false,
            transmittance_cutoff: 1e-4,
            alpha_max: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RenderKey {
    len: usize,
    checksum: u64,
    pose: [f64; 7],
    k: CameraIntrinsics,
    settings: RenderSettings,
}

impl RenderKey {
    fn new(cloud: &GaussianCloud, pose: &PoseSE3, k: &CameraIntrinsics, settings: &RenderSettings) -> Self {
        Self {
            len: cloud.len(),
            checksum: cloud.checksum(),
            pose: pose.to_array(),
            k: *k,
            settings: *settings,
        }
    }
}

#[derive(Debug, Clone)]
enum Lists {
    Tiled { tiles_x: usize, lists: Vec<Vec<u32>> },
    Global(Vec<u32>),
}

/// Everything the backward pass needs to replay the forward composite.
#[derive(Debug, Clone)]
struct BlendState {
    key: RenderKey,
    splats: Vec<Option<ProjectedGaussian>>,
    lists: Lists,
    final_t: Vec<f64>,
    /// Number of list entries scanned per pixel.
    scanned: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: DepthMap,
    /// Accumulated opacity `1 - T_final`.
    pub alpha: DepthMap,
    state: BlendState,
}

impl RenderOutput {
    /// Number of Gaussians that touch at least one pixel.
    pub fn visible_count(&self) -> usize {
        self.state.splats.iter().filter(|s| s.is_some()).count()
    }

    /// Per-pixel count of Gaussians that contributed to the composite.
    pub fn contributor_counts(&self) -> Grid<u32> {
        let (w, h) = self.color.dims();
        Grid::from_fn(w, h, |x, y| {
            let list = self.list_for(x, y);
            let n = self.state.scanned[y * w + x] as usize;
            list[..n]
                .iter()
                .filter(|&&g| {
                    let s = self.state.splats[g as usize].as_ref().expect("listed splats are visible");
                    footprint(s, x, y).is_some()
                })
                .count() as u32
        })
    }

    /// Hash of which splats touch which pixels and whether their alpha was
    /// clamped. Finite-difference checks are only meaningful when it is
    /// unchanged across the perturbation.
    pub fn contribution_signature(&self) -> u64 {
        let (w, h) = self.color.dims();
        let settings = self.state.key.settings;
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |v: u64| {
            hash ^= v;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for y in 0..h {
            for x in 0..w {
                let list = self.list_for(x, y);
                let n = self.state.scanned[y * w + x] as usize;
                for &gid in &list[..n] {
                    let s = self.state.splats[gid as usize].as_ref().expect("visible");
                    if let Some(d) = footprint(s, x, y) {
                        let clamped = s.alpha * gaussian_weight(s, &d) >= settings.alpha_max;
                        feed(((y * w + x) as u64) << 33 | (gid as u64) << 1 | clamped as u64);
                    }
                }
                feed(u64::MAX);
            }
        }
        for s in self.state.splats.iter().flatten() {
            feed(s.color_inside.iter().fold(0, |a, &b| a << 1 | b as u64));
        }
        hash
    }

    fn list_for(&self, x: usize, y: usize) -> &[u32] {
        match &self.state.lists {
            Lists::Tiled { tiles_x, lists } => {
                let ts = self.state.key.settings.tile_size;
                &lists[(y / ts) * tiles_x + x / ts]
            }
            Lists::Global(order) => order,
        }
    }
}

/// Pixel offset from the splat centre, if the pixel lies inside its footprint.
#[inline]
fn footprint(s: &ProjectedGaussian, x: usize, y: usize) -> Option<Vector2<f64>> {
    let d = Vector2::new(x as f64 - s.mean2d.x, y as f64 - s.mean2d.y);
    if d.x * d.x + d.y * d.y <= s.radius * s.radius {
        Some(d)
    } else {
        None
    }
}

#[inline]
fn gaussian_weight(s: &ProjectedGaussian, d: &Vector2<f64>) -> f64 {
    let a = &s.conic;
    let power = -0.5 * (a[(0, 0)] * d.x * d.x + 2.0 * a[(0, 1)] * d.x * d.y + a[(1, 1)] * d.y * d.y);
    power.exp()
}

/// Inclusive pixel bounding box of a splat's footprint clipped to the image.
fn pixel_bounds(s: &ProjectedGaussian, k: &CameraIntrinsics) -> Option<(usize, usize, usize, usize)> {
    let x0 = (s.mean2d.x - s.radius).ceil().max(0.0);
    let y0 = (s.mean2d.y - s.radius).ceil().max(0.0);
    let x1 = (s.mean2d.x + s.radius).floor().min(k.width as f64 - 1.0);
    let y1 = (s.mean2d.y + s.radius).floor().min(k.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

fn project_all(
    cloud: &GaussianCloud,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Vec<Option<ProjectedGaussian>> {
    let w = pose.rotation();
    let center = pose.camera_center();
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let s = project_with_rotation(cloud, i, pose, &w, &center, k, settings.z_near).ok()?;
            let finite = s.mean2d.iter().all(|v| v.is_finite()) && s.radius.is_finite() && s.conic.iter().all(|v| v.is_finite());
            if !finite {
                return None;
            }
            pixel_bounds(&s, k)?;
            Some(s)
        })
        .collect()
}

/// Visible splats ordered front to back, ties broken by index.
fn depth_order(splats: &[Option<ProjectedGaussian>]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).filter(|&i| splats[i as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].as_ref().map(|s| s.depth).unwrap_or(0.0);
        let db = splats[b as usize].as_ref().map(|s| s.depth).unwrap_or(0.0);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

struct PixelResult {
    color: [f64; 3],
    depth: f64,
    t: f64,
    scanned: u32,
}

#[inline]
fn composite_pixel(
    x: usize,
    y: usize,
    list: &[u32],
    splats: &[Option<ProjectedGaussian>],
    settings: &RenderSettings,
) -> PixelResult {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut t = 1.0;
    let mut scanned = list.len() as u32;
    for (pos, &gid) in list.iter().enumerate() {
        let s = splats[gid as usize].as_ref().expect("listed splats are visible");
        let Some(d) = footprint(s, x, y) else { continue };
        let alpha = (s.alpha * gaussian_weight(s, &d)).min(settings.alpha_max);
        let w = alpha * t;
        for ch in 0..3 {
            color[ch] += s.view_color[ch] * w;
        }
        depth += s.depth * w;
        t *= 1.0 - alpha;
        if settings.early_termination && t < settings.transmittance_cutoff {
            scanned = pos as u32 + 1;
            break;
        }
    }
    PixelResult { color, depth, t, scanned }
}

pub fn render(cloud: &GaussianCloud, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<RenderOutput> {
    render_with(cloud, pose, k, &RenderSettings::default())
}

/// Tiled renderer.
pub fn render_with(
    cloud: &GaussianCloud,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    if cloud.is_empty() {
        return Err(Error::EmptyScene);
    }
    let (width, height) = k.dims();
    let ts = settings.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let splats = project_all(cloud, pose, k, settings);
    let order = depth_order(&splats);

    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &gid in &order {
        let s = splats[gid as usize].as_ref().expect("ordered splats are visible");
        let (x0, y0, x1, y1) = pixel_bounds(s, k).expect("visible splats have bounds");
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                lists[ty * tiles_x + tx].push(gid);
            }
        }
    }

    let tile_results: Vec<Vec<(usize, PixelResult)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &lists[tile];
            let mut out = Vec::with_capacity(ts * ts);
            for y in ty * ts..((ty + 1) * ts).min(height) {
                for x in tx * ts..((tx + 1) * ts).min(width) {
                    out.push((y * width + x, composite_pixel(x, y, list, &splats, settings)));
                }
            }
            out
        })
        .collect();

    let mut color = RgbImage::filled(width, height, [0.0; 3]);
    let mut depth = DepthMap::filled(width, height, 0.0);
    let mut alpha = DepthMap::filled(width, height, 0.0);
    let mut final_t = vec![1.0; width * height];
    let mut scanned = vec![0u32; width * height];
    for tile in tile_results {
        for (idx, px) in tile {
            color.as_mut_slice()[idx] = px.color;
            depth.as_mut_slice()[idx] = px.depth;
            alpha.as_mut_slice()[idx] = 1.0 - px.t;
            final_t[idx] = px.t;
            scanned[idx] = px.scanned;
        }
    }
    Ok(RenderOutput {
        color,
        depth,
        alpha,
        state: BlendState {
            key: RenderKey::new(cloud, pose, k, settings),
            splats,
            lists: Lists::Tiled { tiles_x, lists },
            final_t,
            scanned,
        },
    })
}

pub fn naive_render(cloud: &GaussianCloud, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<RenderOutput> {
    naive_render_with(cloud, pose, k, &RenderSettings::default())
}

/// Reference renderer: every pixel walks all visible splats in global depth
/// order with the full transmittance product (no tiling, no early exit).
pub fn naive_render_with(
    cloud: &GaussianCloud,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    if cloud.is_empty() {
        return Err(Error::EmptyScene);
    }
    let settings = RenderSettings {
        early_termination: false,
        ..*settings
    };
    let (width, height) = k.dims();
    let splats = project_all(cloud, pose, k, &settings);
    let order = depth_order(&splats);

    let rows: Vec<Vec<([f64; 3], f64, f64)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let mut color = [0.0; 3];
                    let mut depth = 0.0;
                    let mut transmittance = 1.0;
                    for &gid in &order {
                        let s = splats[gid as usize].as_ref().expect("ordered splats are visible");
                        let dx = x as f64 - s.mean2d.x;
                        let dy = y as f64 - s.mean2d.y;
                        if dx * dx + dy * dy > s.radius * s.radius {
                            continue;
                        }
                        let a = &s.conic;
                        let power = -0.5 * (a[(0, 0)] * dx * dx + 2.0 * a[(0, 1)] * dx * dy + a[(1, 1)] * dy * dy);
                        let alpha = (s.alpha * power.exp()).min(settings.alpha_max);
                        let weight = alpha * transmittance;
                        for ch in 0..3 {
                            color[ch] += s.view_color[ch] * weight;
                        }
                        depth += s.depth * weight;
                        transmittance *= 1.0 - alpha;
                    }
                    (color, depth, transmittance)
                })
                .collect()
        })
        .collect();

    let mut color = RgbImage::filled(width, height, [0.0; 3]);
    let mut depth = DepthMap::filled(width, height, 0.0);
    let mut alpha = DepthMap::filled(width, height, 0.0);
    let mut final_t = vec![1.0; width * height];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d, t)) in row.into_iter().enumerate() {
            *color.get_mut(x, y) = c;
            *depth.get_mut(x, y) = d;
            *alpha.get_mut(x, y) = 1.0 - t;
            final_t[y * width + x] = t;
        }
    }
    let scanned = vec![order.len() as u32; width * height];
    Ok(RenderOutput {
        color,
        depth,
        alpha,
        state: BlendState {
            key: RenderKey::new(cloud, pose, k, &settings),
            splats,
            lists: Lists::Global(order),
            final_t,
            scanned,
        },
    })
}

/// Per-pixel `Σ α_i T_i + T_final`, recomputed from scratch over every
/// contributing splat (no early termination). Equals 1 up to rounding.
pub fn transmittance_partition(cloud: &GaussianCloud, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<DepthMap> {
    let out = naive_render(cloud, pose, k)?;
    let (w, h) = k.dims();
    let order = match &out.state.lists {
        Lists::Global(o) => o.clone(),
        Lists::Tiled { .. } => unreachable!("naive render uses a global list"),
    };
    let settings = out.state.key.settings;
    Ok(DepthMap::from_fn(w, h, |x, y| {
        let mut weights = 0.0;
        let mut product = 1.0;
        for &gid in &order {
            let s = out.state.splats[gid as usize].as_ref().expect("visible");
            if let Some(d) = footprint(s, x, y) {
                let alpha = (s.alpha * gaussian_weight(s, &d)).min(settings.alpha_max);
                weights += alpha * product;
                product *= 1.0 - alpha;
            }
        }
        weights + product
    }))
}

pub fn visibility_map(output: &RenderOutput, gamma: f64) -> Mask {
    output.alpha.map(|a| *a > gamma)
}

// ---------------------------------------------------------------------------
// Backward

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<[f64; 3]>,
    pub pose_q: Quat,
    pub pose_t: Vector3<f64>,
    /// Norm of the image-space mean gradient, in normalized device units.
    pub mean2d_norm: Vec<f64>,
    /// Whether each Gaussian was rendered in this view.
    pub visible: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![[0.0; 3]; cloud.sh.len()],
            pose_q: [0.0; 4],
            pose_t: Vector3::zeros(),
            mean2d_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh.iter().flatten().all(|v| v.is_finite())
            && self.pose_q.iter().all(|v| v.is_finite())
            && self.pose_t.iter().all(|v| v.is_finite())
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &SceneGradients, scale: f64) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]], s: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for i in 0..N {
                    x[i] += s * y[i];
                }
            }
        }
        add(&mut self.positions, &other.positions, scale);
        add(&mut self.rotations, &other.rotations, scale);
        add(&mut self.log_scales, &other.log_scales, scale);
        add(&mut self.sh, &other.sh, scale);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += scale * y;
        }
        for i in 0..4 {
            self.pose_q[i] += scale * other.pose_q[i];
        }
        self.pose_t += scale * other.pose_t;
        for (x, y) in self.mean2d_norm.iter_mut().zip(&other.mean2d_norm) {
            *x += scale.abs() * y;
        }
        for (x, y) in self.visible.iter_mut().zip(&other.visible) {
            *x |= *y;
        }
    }
}

/// Gradients with respect to one splat's image-space quantities.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    /// Full-matrix gradient on the conic: `[xx, xy (= yx), yy]`.
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Walks one pixel's contributors back to front, adding their gradients.
#[allow(clippy::too_many_arguments)]
#[inline]
fn backward_pixel(
    x: usize,
    y: usize,
    list: &[u32],
    scanned: usize,
    final_t: f64,
    splats: &[Option<ProjectedGaussian>],
    settings: &RenderSettings,
    d_color: [f64; 3],
    d_depth: f64,
    d_alpha: f64,
    grads: &mut [SplatGrad],
) {
    let mut t = final_t;
    let mut acc_c = [0.0; 3];
    let mut acc_d = 0.0;
    let mut acc_a = 0.0;
    for pos in (0..scanned).rev() {
        let s = splats[list[pos] as usize].as_ref().expect("listed splats are visible");
        let Some(d) = footprint(s, x, y) else { continue };
        let g = gaussian_weight(s, &d);
        let raw = s.alpha * g;
        let alpha = raw.min(settings.alpha_max);
        let one_minus = 1.0 - alpha;
        let t_before = t / one_minus;
        let w = alpha * t_before;

        let out = &mut grads[pos];
        let mut d_a = 0.0;
        for ch in 0..3 {
            out.color[ch] += w * d_color[ch];
            d_a += d_color[ch] * (s.view_color[ch] * t_before - acc_c[ch] / one_minus);
            acc_c[ch] += s.view_color[ch] * w;
        }
        out.depth += w * d_depth;
        d_a += d_depth * (s.depth * t_before - acc_d / one_minus);
        d_a += d_alpha * (t_before - acc_a / one_minus);
        acc_d += s.depth * w;
        acc_a += w;
        t = t_before;

        if raw < settings.alpha_max {
            out.opacity += d_a * g;
            let d_power = d_a * raw;
            let a = &s.conic;
            // power = -½ δᵀ A δ with δ = pixel - mean.
            out.mean[0] += d_power * (a[(0, 0)] * d.x + a[(0, 1)] * d.y);
            out.mean[1] += d_power * (a[(1, 0)] * d.x + a[(1, 1)] * d.y);
            out.conic[0] += -0.5 * d_power * d.x * d.x;
            out.conic[1] += -0.5 * d_power * d.x * d.y;
            out.conic[2] += -0.5 * d_power * d.y * d.y;
        }
    }
}

struct ParamGrad {
    position: [f64; 3],
    rotation: Quat,
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh: Vec<[f64; 3]>,
    d_rot_pose: Matrix3<f64>,
    d_t_pose: Vector3<f64>,
    mean2d_norm: f64,
}

/// Chains one splat's image-space gradient to the cloud and pose parameters.
fn chain_to_params(
    cloud: &GaussianCloud,
    i: usize,
    s: &ProjectedGaussian,
    g: &SplatGrad,
    pose: &PoseSE3,
    w: &Matrix3<f64>,
    k: &CameraIntrinsics,
) -> ParamGrad {
    let p = s.p_cam;
    let (x, y, z) = (p.x, p.y, p.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    // conic → cov2d → (M = J W, Σ)
    let a = s.conic;
    let ga = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
    let g_cov = -(a * ga * a);
    let jac = perspective_jacobian(&p, k);
    let m = jac * w;
    let q_unit = quat_normalize(&cloud.rotations[i]);
    let sigma = build_covariance(&q_unit, &cloud.log_scales[i]);
    let g_sigma = m.transpose() * g_cov * m;
    let g_m = 2.0 * g_cov * m * sigma;
    let g_j = g_m * w.transpose();
    let mut g_w = jac.transpose() * g_m;

    let mut g_p = Vector3::zeros();
    g_p.x += g_j[(0, 2)] * (-k.fx * iz2);
    g_p.y += g_j[(1, 2)] * (-k.fy * iz2);
    g_p.z += g_j[(0, 0)] * (-k.fx * iz2)
        + g_j[(0, 2)] * (2.0 * k.fx * x * iz3)
        + g_j[(1, 1)] * (-k.fy * iz2)
        + g_j[(1, 2)] * (2.0 * k.fy * y * iz3);
    // mean2d
    let gm = Vector2::new(g.mean[0], g.mean[1]);
    g_p.x += gm.x * k.fx * iz;
    g_p.y += gm.y * k.fy * iz;
    g_p.z += -(gm.x * k.fx * x + gm.y * k.fy * y) * iz2;
    g_p.z += g.depth;

    let mu = Vector3::from(cloud.positions[i]);
    let mut g_mu = w.transpose() * g_p;
    let mut g_t = g_p;
    g_w += g_p * mu.transpose();

    // Colour through the SH basis and the view direction.
    let degree = cloud.sh_degree();
    let nc = cloud.coeffs_per_gaussian();
    let coeffs = cloud.sh_of(i);
    let mut gc = [0.0; 3];
    for ch in 0..3 {
        if s.color_inside[ch] {
            gc[ch] = g.color[ch];
        }
    }
    let vnorm = s.view_vec.norm();
    let dir = s.view_vec / vnorm;
    let basis = sh::basis(degree, &dir);
    let mut g_sh = vec![[0.0; 3]; nc];
    for kk in 0..nc {
        for ch in 0..3 {
            g_sh[kk][ch] = basis[kk] * gc[ch];
        }
    }
    if degree > 0 {
        let bj = sh::basis_jacobian(degree, &dir);
        let mut g_dir = Vector3::zeros();
        for kk in 1..nc {
            let weight: f64 = (0..3).map(|ch| coeffs[kk][ch] * gc[ch]).sum();
            g_dir += Vector3::from(bj[kk]) * weight;
        }
        let g_v = (g_dir - dir * dir.dot(&g_dir)) / vnorm;
        g_mu += g_v;
        // camera centre c = -Wᵀ t receives -g_v
        let g_c = -g_v;
        g_t += -(w * g_c);
        g_w += -(pose.t * g_c.transpose());
    }

    // Σ = L Lᵀ, L = R_g diag(s)
    let r_g = quat_to_rotation(&q_unit);
    let scales = Vector3::from(cloud.log_scales[i]).map(f64::exp);
    let l = r_g * Matrix3::from_diagonal(&scales);
    let g_l = 2.0 * g_sigma * l;
    let g_r = g_l * Matrix3::from_diagonal(&scales);
    let mut log_scale = [0.0; 3];
    for c in 0..3 {
        let g_s: f64 = (0..3).map(|r| r_g[(r, c)] * g_l[(r, c)]).sum();
        log_scale[c] = g_s * scales[c];
    }
    let rotation = normalize_vjp(&cloud.rotations[i], &rotation_vjp(&q_unit, &g_r));

    let o = s.alpha;
    ParamGrad {
        position: [g_mu.x, g_mu.y, g_mu.z],
        rotation,
        log_scale,
        opacity_logit: g.opacity * o * (1.0 - o),
        sh: g_sh,
        d_rot_pose: g_w,
        d_t_pose: g_t,
        mean2d_norm: (gm.x * 0.5 * k.width as f64).hypot(gm.y * 0.5 * k.height as f64),
    }
}

/// Exact gradients of the composite with respect to the cloud and the pose.
///
/// `d_depth` and `d_alpha` may be omitted when their upstream gradient is zero.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    output: &RenderOutput,
    d_color: &RgbImage,
    d_depth: Option<&DepthMap>,
    d_alpha: Option<&DepthMap>,
) -> Result<SceneGradients> {
    let state = &output.state;
    if state.key != RenderKey::new(cloud, pose, k, &state.key.settings) {
        return Err(Error::StaleRenderState);
    }
    let dims = k.dims();
    d_color.ensure_dims(dims)?;
    if let Some(d) = d_depth {
        d.ensure_dims(dims)?;
    }
    if let Some(d) = d_alpha {
        d.ensure_dims(dims)?;
    }
    let settings = state.key.settings;
    let (width, height) = dims;
    let upstream = |idx: usize| -> ([f64; 3], f64, f64) {
        (
            d_color.as_slice()[idx],
            d_depth.map_or(0.0, |m| m.as_slice()[idx]),
            d_alpha.map_or(0.0, |m| m.as_slice()[idx]),
        )
    };
    let is_zero = |u: &([f64; 3], f64, f64)| u.0 == [0.0; 3] && u.1 == 0.0 && u.2 == 0.0;

    let mut per_splat = vec![SplatGrad::default(); cloud.len()];
    match &state.lists {
        Lists::Tiled { tiles_x, lists } => {
            let ts = settings.tile_size.max(1);
            let tile_grads: Vec<Vec<SplatGrad>> = lists
                .par_iter()
                .enumerate()
                .map(|(tile, list)| {
                    let mut local = vec![SplatGrad::default(); list.len()];
                    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
                    for y in ty * ts..((ty + 1) * ts).min(height) {
                        for x in tx * ts..((tx + 1) * ts).min(width) {
                            let idx = y * width + x;
                            let u = upstream(idx);
                            if is_zero(&u) {
                                continue;
                            }
                            backward_pixel(
                                x,
                                y,
                                list,
                                state.scanned[idx] as usize,
                                state.final_t[idx],
                                &state.splats,
                                &settings,
                                u.0,
                                u.1,
                                u.2,
                                &mut local,
                            );
                        }
                    }
                    local
                })
                .collect();
            for (list, grads) in lists.iter().zip(&tile_grads) {
                for (gid, g) in list.iter().zip(grads) {
                    per_splat[*gid as usize].add(g);
                }
            }
        }
        Lists::Global(order) => {
            let rows: Vec<Vec<SplatGrad>> = (0..height)
                .into_par_iter()
                .map(|y| {
                    let mut local = vec![SplatGrad::default(); order.len()];
                    for x in 0..width {
                        let idx = y * width + x;
                        let u = upstream(idx);
                        if is_zero(&u) {
                            continue;
                        }
                        backward_pixel(
                            x,
                            y,
                            order,
                            state.scanned[idx] as usize,
                            state.final_t[idx],
                            &state.splats,
                            &settings,
                            u.0,
                            u.1,
                            u.2,
                            &mut local,
                        );
                    }
                    local
                })
                .collect();
            for grads in &rows {
                for (gid, g) in order.iter().zip(grads) {
                    per_splat[*gid as usize].add(g);
                }
            }
        }
    }

    let w = pose.rotation();
    let params: Vec<Option<ParamGrad>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let s = state.splats[i].as_ref()?;
            Some(chain_to_params(cloud, i, s, &per_splat[i], pose, &w, k))
        })
        .collect();

    let mut out = SceneGradients::zeros(cloud);
    let nc = cloud.coeffs_per_gaussian();
    let mut d_rot = Matrix3::zeros();
    for (i, p) in params.into_iter().enumerate() {
        let Some(p) = p else { continue };
        out.positions[i] = p.position;
        out.rotations[i] = p.rotation;
        out.log_scales[i] = p.log_scale;
        out.opacity_logits[i] = p.opacity_logit;
        out.sh[i * nc..(i + 1) * nc].copy_from_slice(&p.sh);
        out.mean2d_norm[i] = p.mean2d_norm;
        out.visible[i] = true;
        d_rot += p.d_rot_pose;
        out.pose_t += p.d_t_pose;
    }
    let q = pose.q();
    out.pose_q = normalize_vjp(&q, &rotation_vjp(&q, &d_rot));
    Ok(out)
}
