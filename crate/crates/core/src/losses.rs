//! Training objectives and their gradients with respect to rendered
//! quantities: L1 + D-SSIM photometric loss, masked flow loss and
//! scale-and-shift aligned depth loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ensure_flow_dims, FlowField};
use crate::grid::{DepthMap, Grid, Mask, RgbImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Fewest valid pixels the depth alignment accepts.
pub const MIN_DEPTH_PIXELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Share of D-SSIM inside the photometric loss.
    pub lambda_dssim: f64,
    pub lambda_rgb: f64,
    pub lambda_flow: f64,
    pub lambda_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            lambda_rgb: 1.0,
            lambda_flow: 0.1,
            lambda_depth: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_dssim, self.lambda_rgb, self.lambda_flow, self.lambda_depth];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.lambda_dssim > 1.0 {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative with lambda_dssim <= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `λ₁ L_rgb + λ₂ L_flow`.
    pub fn pose_objective(&self, rgb: f64, flow: f64) -> f64 {
        self.lambda_rgb * rgb + self.lambda_flow * flow
    }

    /// `λ₁ L_rgb + λ₂ L_flow + λ₃ L_depth`.
    pub fn scene_objective(&self, rgb: f64, flow: f64, depth: f64) -> f64 {
        self.lambda_rgb * rgb + self.lambda_flow * flow + self.lambda_depth * depth
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "same" Gaussian blur with zero padding. The kernel is symmetric,
/// so this operator is its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &RgbImage, ch: usize) -> Vec<f64> {
    img.as_slice().iter().map(|p| p[ch]).collect()
}

/// Mean SSIM over all pixels and channels, and optionally its gradient with
/// respect to `x`.
fn ssim_impl(x: &RgbImage, y: &RgbImage, want_grad: bool) -> (f64, Option<RgbImage>) {
    let (w, h) = x.dims();
    let n = w * h;
    let kernel = gaussian_kernel();
    let m = (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| RgbImage::filled(w, h, [0.0; 3]));
    for ch in 0..3 {
        let xs = channel(x, ch);
        let ys = channel(y, ch);
        let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
        let mu_x = blur(&xs, w, h, &kernel);
        let mu_y = blur(&ys, w, h, &kernel);
        let e_xx = blur(&sq(&xs, &xs), w, h, &kernel);
        let e_yy = blur(&sq(&ys, &ys), w, h, &kernel);
        let e_xy = blur(&sq(&xs, &ys), w, h, &kernel);
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d = b1 * b2;
                g_mu[i] = (2.0 * my * (a2 - a1) / d - s * (2.0 * mx / b1 - 2.0 * mx / b2)) / m;
                g_xx[i] = -s / b2 / m;
                g_xy[i] = 2.0 * a1 / d / m;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = blur(&g_mu, w, h, &kernel);
            let g_xx = blur(&g_xx, w, h, &kernel);
            let g_xy = blur(&g_xy, w, h, &kernel);
            for (i, px) in g.as_mut_slice().iter_mut().enumerate() {
                px[ch] = g_mu[i] + 2.0 * xs[i] * g_xx[i] + ys[i] * g_xy[i];
            }
        }
    }
    (total / m, grad)
}

/// Mean structural similarity (11×11 Gaussian window, σ = 1.5, zero padding).
pub fn ssim(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    y.ensure_dims(x.dims())?;
    Ok(ssim_impl(x, y, false).0)
}

/// `(1 - λ) L1 + λ (1 - SSIM) / 2` and its gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &RgbImage, target: &RgbImage, lambda_dssim: f64) -> Result<(f64, RgbImage)> {
    target.ensure_dims(rendered.dims())?;
    let m = (3 * rendered.len()) as f64;
    let mut l1 = 0.0;
    let mut grad = rendered.map(|_| [0.0; 3]);
    for ((g, r), t) in grad.as_mut_slice().iter_mut().zip(rendered.as_slice()).zip(target.as_slice()) {
        for ch in 0..3 {
            let e = r[ch] - t[ch];
            l1 += e.abs();
            g[ch] = (1.0 - lambda_dssim) * sign(e) / m;
        }
    }
    l1 /= m;
    let mut loss = (1.0 - lambda_dssim) * l1;
    if lambda_dssim > 0.0 {
        let (s, g_s) = ssim_impl(rendered, target, true);
        loss += lambda_dssim * (1.0 - s) / 2.0;
        let g_s = g_s.expect("gradient requested");
        for (g, gs) in grad.as_mut_slice().iter_mut().zip(g_s.as_slice()) {
            for ch in 0..3 {
                g[ch] -= 0.5 * lambda_dssim * gs[ch];
            }
        }
    }
    Ok((loss, grad))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean squared flow residual over pixels that are masked in and valid in
/// both fields, with its gradient with respect to `projection`.
pub fn flow_loss(projection: &FlowField, prior: &FlowField, mask: &Mask) -> Result<(f64, Grid<[f64; 2]>)> {
    let dims = projection.dims();
    ensure_flow_dims(prior, dims)?;
    mask.ensure_dims(dims)?;
    let used: Vec<bool> = (0..projection.uv.len())
        .map(|i| mask.as_slice()[i] && projection.valid.as_slice()[i] && prior.valid.as_slice()[i])
        .collect();
    let count = used.iter().filter(|u| **u).count();
    let mut grad = Grid::filled(dims.0, dims.1, [0.0; 2]);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut loss = 0.0;
    for (i, g) in grad.as_mut_slice().iter_mut().enumerate() {
        if !used[i] {
            continue;
        }
        let p = projection.uv.as_slice()[i];
        let q = prior.uv.as_slice()[i];
        let (du, dv) = (p[0] - q[0], p[1] - q[1]);
        loss += du * du + dv * dv;
        *g = [2.0 * du / n, 2.0 * dv / n];
    }
    Ok((loss / n, grad))
}

/// Least-squares `(s, b)` with `s·prior + b ≈ rendered` over the given pixels.
pub fn align_scale_shift(rendered: &[f64], prior: &[f64]) -> (f64, f64) {
    let n = rendered.len() as f64;
    let sp: f64 = prior.iter().sum();
    let sr: f64 = rendered.iter().sum();
    let spp: f64 = prior.iter().map(|p| p * p).sum();
    let spr: f64 = prior.iter().zip(rendered).map(|(p, r)| p * r).sum();
    let den = n * spp - sp * sp;
    if !(den > 1e-12 * n * spp.max(f64::MIN_POSITIVE)) {
        return (0.0, sr / n);
    }
    let s = (n * spr - sp * sr) / den;
    (s, (sr - s * sp) / n)
}

/// Mean absolute error after aligning the prior to the rendered depth by
/// least-squares scale and shift over the valid pixels (masked in, prior
/// positive and finite). The gradient is exact, including the dependence of
/// the alignment on the rendered depth.
pub fn depth_loss(rendered: &DepthMap, prior: &DepthMap, valid: &Mask) -> Result<(f64, DepthMap)> {
    let dims = rendered.dims();
    prior.ensure_dims(dims)?;
    valid.ensure_dims(dims)?;
    let idx: Vec<usize> = (0..rendered.len())
        .filter(|&i| {
            let p = prior.as_slice()[i];
            valid.as_slice()[i] && p.is_finite() && p > 0.0 && rendered.as_slice()[i].is_finite()
        })
        .collect();
    if idx.len() < MIN_DEPTH_PIXELS {
        return Err(Error::InsufficientValidPixels {
            required: MIN_DEPTH_PIXELS,
            actual: idx.len(),
        });
    }
    let r: Vec<f64> = idx.iter().map(|&i| rendered.as_slice()[i]).collect();
    let p: Vec<f64> = idx.iter().map(|&i| prior.as_slice()[i]).collect();
    let n = r.len() as f64;
    let (s, b) = align_scale_shift(&r, &p);
    let signs: Vec<f64> = r.iter().zip(&p).map(|(ri, pi)| sign(ri - s * pi - b)).collect();
    let loss = r.iter().zip(&p).map(|(ri, pi)| (ri - s * pi - b).abs()).sum::<f64>() / n;

    let sp: f64 = p.iter().sum();
    let spp: f64 = p.iter().map(|v| v * v).sum();
    let den = n * spp - sp * sp;
    let degenerate = !(den > 1e-12 * n * spp.max(f64::MIN_POSITIVE));
    let sig: f64 = signs.iter().sum();
    let sig_p: f64 = signs.iter().zip(&p).map(|(a, b)| a * b).sum();
    let mut grad = Grid::filled(dims.0, dims.1, 0.0);
    for (j, &i) in idx.iter().enumerate() {
        let ds = if degenerate { 0.0 } else { (n * p[j] - sp) / den };
        let db = (1.0 - sp * ds) / n;
        grad.as_mut_slice()[i] = (signs[j] - sig_p * ds - sig * db) / n;
    }
    Ok((loss, grad))
}
