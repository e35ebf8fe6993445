//! Dense flow fields: projection flow induced by rendered depth and a pose
//! pair, the epipolar consistency (rigid) mask, and mask algebra.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    fundamental_from_poses, normalize_vjp, rotation_vjp, sampson_distance, CameraIntrinsics, PoseSE3, Quat,
};
use crate::grid::{nearest_pixel, DepthMap, Grid, Mask};

pub use crate::formats::{load_depth, load_flow};

/// Per-pixel displacement `(u, v)` in pixels, target minus source.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub uv: Grid<[f64; 2]>,
    pub valid: Mask,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            uv: Grid::filled(width, height, [0.0; 2]),
            valid: Grid::filled(width, height, true),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.uv.dims()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }

    /// Bilinear sample at a continuous position; `None` if any of the four
    /// neighbours is invalid or outside the field.
    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let (w, h) = self.dims();
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(w.saturating_sub(2));
        let y0 = (v.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let mut out = [0.0; 2];
        for (x, y, wgt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if !*self.valid.get(x, y) {
                return None;
            }
            let f = self.uv.get(x, y);
            out[0] += wgt * f[0];
            out[1] += wgt * f[1];
        }
        Some(out)
    }
}

/// Per-pixel ray with unit z for a pixel centre.
#[inline]
fn pixel_ray(x: usize, y: usize, k: &CameraIntrinsics) -> Vector3<f64> {
    k.ray(Vector2::new(x as f64, y as f64))
}

#[inline]
fn depth_is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Unprojects every pixel with valid rendered depth at `pose_t` and
/// reprojects it into `pose_next`. Pixels with invalid depth or landing behind
/// the next camera are invalid.
pub fn projection_flow(depth: &DepthMap, pose_t: &PoseSE3, pose_next: &PoseSE3, k: &CameraIntrinsics) -> FlowField {
    let (w, h) = depth.dims();
    let rel = pose_next.compose(&pose_t.inverse());
    let r = rel.rotation();
    let rows: Vec<Vec<Option<[f64; 2]>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let d = *depth.get(x, y);
                    if !depth_is_valid(d) {
                        return None;
                    }
                    let p = r * (pixel_ray(x, y, k) * d) + rel.t;
                    if !(p.z > crate::geometry::Z_NEAR) {
                        return None;
                    }
                    let q = k.project_camera(&p);
                    Some([q.x - x as f64, q.y - y as f64])
                })
                .collect()
        })
        .collect();
    let mut uv = Grid::filled(w, h, [0.0; 2]);
    let mut valid = Grid::filled(w, h, false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, f) in row.into_iter().enumerate() {
            if let Some(f) = f {
                *uv.get_mut(x, y) = f;
                *valid.get_mut(x, y) = true;
            }
        }
    }
    FlowField { uv, valid }
}

/// Gradients of a scalar through `projection_flow`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFlowGrad {
    pub depth: DepthMap,
    pub pose_next_q: Quat,
    pub pose_next_t: Vector3<f64>,
}

/// Vector-Jacobian product of `projection_flow` with respect to the rendered
/// depth and the target pose, for an upstream gradient `d_flow` on valid pixels.
pub fn projection_flow_vjp(
    depth: &DepthMap,
    pose_t: &PoseSE3,
    pose_next: &PoseSE3,
    k: &CameraIntrinsics,
    d_flow: &Grid<[f64; 2]>,
) -> Result<ProjectionFlowGrad> {
    d_flow.ensure_dims(depth.dims())?;
    let (w, h) = depth.dims();
    let r_t = pose_t.rotation();
    let r_n = pose_next.rotation();
    let rows: Vec<(Vec<f64>, Matrix3<f64>, Vector3<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut d_depth = vec![0.0; w];
            let mut g_r = Matrix3::zeros();
            let mut g_t = Vector3::zeros();
            for (x, dd) in d_depth.iter_mut().enumerate() {
                let g = d_flow.get(x, y);
                let d = *depth.get(x, y);
                if (g[0] == 0.0 && g[1] == 0.0) || !depth_is_valid(d) {
                    continue;
                }
                let ray = pixel_ray(x, y, k);
                let world = r_t.transpose() * (ray * d - pose_t.t);
                let p = r_n * world + pose_next.t;
                if !(p.z > crate::geometry::Z_NEAR) {
                    continue;
                }
                let iz = 1.0 / p.z;
                let g_p = Vector3::new(
                    k.fx * iz * g[0],
                    k.fy * iz * g[1],
                    -(k.fx * p.x * g[0] + k.fy * p.y * g[1]) * iz * iz,
                );
                let g_world = r_n.transpose() * g_p;
                *dd = g_world.dot(&(r_t.transpose() * ray));
                g_r += g_p * world.transpose();
                g_t += g_p;
            }
            (d_depth, g_r, g_t)
        })
        .collect();
    let mut d_depth = Vec::with_capacity(w * h);
    let mut g_r = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    for (row, r, t) in rows {
        d_depth.extend(row);
        g_r += r;
        g_t += t;
    }
    let q = pose_next.q();
    Ok(ProjectionFlowGrad {
        depth: Grid::from_vec(w, h, d_depth)?,
        pose_next_q: normalize_vjp(&q, &rotation_vjp(&q, &g_r)),
        pose_next_t: g_t,
    })
}

/// Epipolar consistency of the flow from the previous frame.
///
/// Each valid vector of `flow_prev` (previous frame to frame t) is scored by its
/// Sampson distance under the fundamental matrix of the pose pair and its
/// verdict is written at the nearest frame-t pixel to where it lands. A pixel
/// reached by several vectors is kept only if all of them pass; pixels reached
/// by none stay true. A degenerate baseline yields an all-true mask.
pub fn rigid_mask(
    flow_prev: &FlowField,
    pose_prev: &PoseSE3,
    pose_t: &PoseSE3,
    k: &CameraIntrinsics,
    beta: f64,
) -> Mask {
    let (w, h) = flow_prev.dims();
    let mut mask = Grid::filled(w, h, true);
    let Ok(f) = fundamental_from_poses(pose_prev, pose_t, k) else {
        return mask;
    };
    for y in 0..h {
        for x in 0..w {
            if !*flow_prev.valid.get(x, y) {
                continue;
            }
            let d = flow_prev.uv.get(x, y);
            let src = Vector2::new(x as f64, y as f64);
            let dst = Vector2::new(src.x + d[0], src.y + d[1]);
            let Some((lx, ly)) = nearest_pixel(dst.x, dst.y, w, h) else { continue };
            if !(sampson_distance(&src, &dst, &f) < beta) {
                *mask.get_mut(lx, ly) = false;
            }
        }
    }
    mask
}

pub fn combine_mask(a: &Mask, b: &Mask) -> Result<Mask> {
    b.ensure_dims(a.dims())?;
    Grid::from_vec(
        a.width(),
        a.height(),
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| *x && *y).collect(),
    )
}

/// Chains `a → b` with `b → c` into `a → c`, sampling the second field
/// bilinearly at the landing points of the first.
pub fn compose_flow(first: &FlowField, second: &FlowField) -> Result<FlowField> {
    second.uv.ensure_dims(first.dims())?;
    let (w, h) = first.dims();
    let mut out = FlowField {
        uv: Grid::filled(w, h, [0.0; 2]),
        valid: Grid::filled(w, h, false),
    };
    for y in 0..h {
        for x in 0..w {
            if !*first.valid.get(x, y) {
                continue;
            }
            let a = *first.uv.get(x, y);
            if let Some(b) = second.sample(x as f64 + a[0], y as f64 + a[1]) {
                *out.uv.get_mut(x, y) = [a[0] + b[0], a[1] + b[1]];
                *out.valid.get_mut(x, y) = true;
            }
        }
    }
    Ok(out)
}

/// Error when a flow field's dimensions disagree with the frame.
pub fn ensure_flow_dims(flow: &FlowField, dims: (usize, usize)) -> Result<()> {
    if flow.dims() != dims || flow.valid.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            actual: flow.dims(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, quat_from_axis_angle, unproject};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 52.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn wavy_depth(w: usize, h: usize) -> DepthMap {
        Grid::from_fn(w, h, |x, y| 2.0 + 0.3 * (x as f64 * 0.3).sin() + 0.2 * (y as f64 * 0.2).cos())
    }

    #[test]
    fn identity_motion_gives_zero_flow() {
        let pose = PoseSE3::new(quat_from_axis_angle(&Vector3::y(), 0.2), Vector3::new(0.1, 0.0, 0.3));
        let f = projection_flow(&wavy_depth(32, 24), &pose, &pose, &k());
        assert_eq!(f.valid_count(), 32 * 24);
        for uv in f.uv.as_slice() {
            assert!(uv[0].abs() < 1e-12 && uv[1].abs() < 1e-12);
        }
    }

    #[test]
    fn x_translation_gives_disparity() {
        let z = 3.0;
        let b = 0.2;
        let depth = Grid::filled(32, 24, z);
        // Camera centre moves by +b along x: points shift by -b in the camera frame.
        let next = PoseSE3::new([1.0, 0.0, 0.0, 0.0], Vector3::new(-b, 0.0, 0.0));
        let f = projection_flow(&depth, &PoseSE3::identity(), &next, &k());
        for uv in f.uv.as_slice() {
            assert_abs_diff_eq!(uv[0], -k().fx * b / z, epsilon = 1e-6);
            assert_abs_diff_eq!(uv[1], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn invalid_depth_and_behind_camera() {
        let mut depth = Grid::filled(32, 24, 1.0);
        *depth.get_mut(0, 0) = 0.0;
        *depth.get_mut(1, 0) = f64::NAN;
        let f = projection_flow(&depth, &PoseSE3::identity(), &PoseSE3::identity(), &k());
        assert!(!f.valid.get(0, 0) && !f.valid.get(1, 0) && *f.valid.get(2, 0));
        let behind = PoseSE3::new([1.0, 0.0, 0.0, 0.0], Vector3::new(0.0, 0.0, -5.0));
        let f = projection_flow(&depth, &PoseSE3::identity(), &behind, &k());
        assert_eq!(f.valid_count(), 0);
    }

    #[test]
    fn projection_flow_matches_point_transfer() {
        let kk = k();
        let a = PoseSE3::new(quat_from_axis_angle(&Vector3::new(0.2, 1.0, 0.1).normalize(), 0.05), Vector3::new(0.1, 0.0, 0.0));
        let b = PoseSE3::new(quat_from_axis_angle(&Vector3::new(1.0, 0.2, 0.0).normalize(), -0.04), Vector3::new(0.0, 0.1, 0.1));
        let depth = wavy_depth(32, 24);
        let f = projection_flow(&depth, &a, &b, &kk);
        for (x, y) in [(3, 4), (20, 10), (31, 23)] {
            let world = unproject(&Vector2::new(x as f64, y as f64), *depth.get(x, y), &a, &kk).unwrap();
            let q = project(&world, &b, &kk).unwrap();
            let uv = f.uv.get(x, y);
            assert_abs_diff_eq!(uv[0], q.x - x as f64, epsilon = 1e-9);
            assert_abs_diff_eq!(uv[1], q.y - y as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let kk = k();
        let a = PoseSE3::new(quat_from_axis_angle(&Vector3::y(), 0.03), Vector3::new(0.05, 0.0, 0.0));
        let b = PoseSE3::new(quat_from_axis_angle(&Vector3::new(0.3, 1.0, 0.0).normalize(), -0.02), Vector3::new(-0.1, 0.02, 0.05));
        let depth = wavy_depth(32, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_flow = Grid::from_fn(32, 24, |_, _| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]);
        let scalar = |depth: &DepthMap, b: &PoseSE3| -> f64 {
            let f = projection_flow(depth, &a, b, &kk);
            f.uv.as_slice().iter().zip(d_flow.as_slice()).map(|(u, g)| u[0] * g[0] + u[1] * g[1]).sum()
        };
        let g = projection_flow_vjp(&depth, &a, &b, &kk, &d_flow).unwrap();
        let h = 1e-4;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "{analytic} vs {fd}");
        };
        for (x, y) in [(0, 0), (7, 13), (31, 23)] {
            let mut dp = depth.clone();
            *dp.get_mut(x, y) += h;
            let mut dm = depth.clone();
            *dm.get_mut(x, y) -= h;
            check(*g.depth.get(x, y), scalar(&dp, &b), scalar(&dm, &b));
        }
        for i in 0..3 {
            let mut bp = b;
            bp.t[i] += h;
            let mut bm = b;
            bm.t[i] -= h;
            check(g.pose_next_t[i], scalar(&depth, &bp), scalar(&depth, &bm));
        }
        for i in 0..4 {
            let mut qp = b.q();
            qp[i] += h;
            let mut qm = b.q();
            qm[i] -= h;
            let bp = PoseSE3::new(qp, b.t);
            let bm = PoseSE3::new(qm, b.t);
            check(g.pose_next_q[i], scalar(&depth, &bp), scalar(&depth, &bm));
        }
    }

    fn consistent_flow(kk: &CameraIntrinsics, a: &PoseSE3, b: &PoseSE3) -> FlowField {
        projection_flow(&wavy_depth(kk.width, kk.height), a, b, kk)
    }

    #[test]
    fn rigid_mask_keeps_consistent_flow() {
        let kk = k();
        let a = PoseSE3::identity();
        let b = PoseSE3::new(quat_from_axis_angle(&Vector3::y(), 0.02), Vector3::new(-0.1, 0.01, 0.02));
        let flow = consistent_flow(&kk, &a, &b);
        let m = rigid_mask(&flow, &a, &b, &kk, 0.5);
        assert!(m.as_slice().iter().all(|v| *v));
    }

    #[test]
    fn rigid_mask_rejects_tangential_outliers() {
        let kk = k();
        let a = PoseSE3::identity();
        let b = PoseSE3::new([1.0, 0.0, 0.0, 0.0], Vector3::new(-0.1, 0.0, 0.0));
        let mut flow = consistent_flow(&kk, &a, &b);
        // Horizontal baseline: epipolar lines are horizontal, so a vertical
        // 5 px offset is perpendicular to them.
        let mut landed = Vec::new();
        for y in 8..14 {
            for x in 10..16 {
                let uv = flow.uv.get_mut(x, y);
                uv[1] += 5.0;
                landed.push(nearest_pixel(x as f64 + uv[0], y as f64 + uv[1], 32, 24).unwrap());
            }
        }
        let m = rigid_mask(&flow, &a, &b, &kk, 0.5);
        let kept = landed.iter().filter(|(x, y)| *m.get(*x, *y)).count();
        assert!(kept * 20 < landed.len(), "{kept} of {} outliers kept", landed.len());
    }

    #[test]
    fn degenerate_baseline_passes_everything() {
        let kk = k();
        let a = PoseSE3::identity();
        let b = PoseSE3::new(quat_from_axis_angle(&Vector3::y(), 0.05), Vector3::zeros());
        let mut flow = consistent_flow(&kk, &a, &b);
        flow.uv.as_mut_slice()[5][1] += 10.0;
        assert!(rigid_mask(&flow, &a, &b, &kk, 0.5).as_slice().iter().all(|v| *v));
    }

    #[test]
    fn combine_mask_exhaustive_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = Grid::from_fn(4, 4, |_, _| rng.random::<bool>());
            let b = Grid::from_fn(4, 4, |_, _| rng.random::<bool>());
            let c = combine_mask(&a, &b).unwrap();
            for i in 0..16 {
                assert_eq!(c.as_slice()[i], a.as_slice()[i] & b.as_slice()[i]);
            }
        }
        let t = Grid::filled(4, 4, true);
        let f = Grid::filled(4, 4, false);
        assert_eq!(combine_mask(&t, &t).unwrap(), t);
        assert_eq!(combine_mask(&t, &f).unwrap(), f);
        assert!(matches!(combine_mask(&t, &Grid::filled(3, 4, true)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn compose_flow_chains_rigid_motion() {
        let kk = k();
        let a = PoseSE3::identity();
        let b = PoseSE3::new([1.0, 0.0, 0.0, 0.0], Vector3::new(-0.05, 0.0, 0.0));
        let c = PoseSE3::new([1.0, 0.0, 0.0, 0.0], Vector3::new(-0.1, 0.0, 0.0));
        let depth = Grid::filled(32, 24, 2.0);
        let ab = projection_flow(&depth, &a, &b, &kk);
        let bc = projection_flow(&depth, &b, &c, &kk);
        let ac = projection_flow(&depth, &a, &c, &kk);
        let composed = compose_flow(&ab, &bc).unwrap();
        for y in 0..24 {
            for x in 3..32 {
                assert!(*composed.valid.get(x, y));
                assert_abs_diff_eq!(composed.uv.get(x, y)[0], ac.uv.get(x, y)[0], epsilon = 1e-9);
            }
        }
        // Landing outside the field invalidates.
        assert!(!composed.valid.get(0, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rigid_mask_monotone_in_beta(seed in 0u64..1000, b1 in 0.01f64..2.0, extra in 0.0f64..2.0) {
            let kk = k();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = PoseSE3::identity();
            let b = PoseSE3::new(quat_from_axis_angle(&Vector3::y(), 0.01), Vector3::new(-0.1, 0.02, 0.0));
            let mut flow = consistent_flow(&kk, &a, &b);
            for uv in flow.uv.as_mut_slice() {
                uv[0] += rng.random::<f64>() * 2.0 - 1.0;
                uv[1] += rng.random::<f64>() * 2.0 - 1.0;
            }
            let m1 = rigid_mask(&flow, &a, &b, &kk, b1);
            let m2 = rigid_mask(&flow, &a, &b, &kk, b1 + extra);
            for (x, y) in m1.as_slice().iter().zip(m2.as_slice()) {
                prop_assert!(!x || *y);
            }
        }

        #[test]
        fn combine_mask_algebra(bits in proptest::collection::vec(any::<bool>(), 48)) {
            let a = Grid::from_vec(4, 4, bits[..16].to_vec()).unwrap();
            let b = Grid::from_vec(4, 4, bits[16..32].to_vec()).unwrap();
            let c = Grid::from_vec(4, 4, bits[32..].to_vec()).unwrap();
            prop_assert_eq!(combine_mask(&a, &b).unwrap(), combine_mask(&b, &a).unwrap());
            prop_assert_eq!(
                combine_mask(&combine_mask(&a, &b).unwrap(), &c).unwrap(),
                combine_mask(&a, &combine_mask(&b, &c).unwrap()).unwrap()
            );
            prop_assert_eq!(combine_mask(&a, &a).unwrap(), a);
        }
    }
}
