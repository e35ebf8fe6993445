use flowsplat::config::RunConfig;
use flowsplat::geometry::{quat_from_axis_angle, CameraIntrinsics, PoseSE3};
use flowsplat::scene::{logit, Gaussian, GaussianCloud};
use flowsplat::sh::{num_coeffs, rgb_to_dc};
use flowsplat::synthetic::SynthConfig;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

pub fn random_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vector3::from(v)
}

pub fn random_pose(rng: &mut ChaCha8Rng, max_angle_deg: f64, max_shift: f64) -> PoseSE3 {
    let angle = rng.random_range(0.0..max_angle_deg).to_radians();
    let q = quat_from_axis_angle(&random_axis(rng), angle);
    let t = Vector3::new(
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
        rng.random_range(-max_shift..max_shift),
    );
    PoseSE3::new(q, t)
}

pub struct SceneSpec {
    pub count: usize,
    pub sh_degree: usize,
    pub depth: (f64, f64),
    /// Half-width of the camera-space box at unit depth.
    pub spread: f64,
    pub log_scale: (f64, f64),
    pub opacity: (f64, f64),
    /// Share of Gaussians placed behind the camera or near the image border.
    pub stray: f64,
    /// Standard deviation of the higher-order SH coefficients.
    pub sh_rest: f64,
}

/// Gaussians generated in camera space of `pose` and mapped to world space.
pub fn random_cloud(rng: &mut ChaCha8Rng, spec: &SceneSpec, pose: &PoseSE3) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(spec.sh_degree);
    let cam_to_world = pose.inverse();
    let rest = Normal::new(0.0, spec.sh_rest.max(1e-12)).unwrap();
    for _ in 0..spec.count {
        let stray = rng.random_bool(spec.stray);
        let z = if stray && rng.random_bool(0.5) {
            rng.random_range(-1.0..0.2)
        } else {
            rng.random_range(spec.depth.0..spec.depth.1)
        };
        let reach = if stray { 1.6 * spec.spread } else { spec.spread };
        let p_cam = Vector3::new(
            rng.random_range(-reach..reach) * z.abs().max(0.5),
            rng.random_range(-reach..reach) * z.abs().max(0.5),
            z,
        );
        let p = cam_to_world.transform_point(&p_cam);
        let colour = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ];
        let mut sh = vec![rgb_to_dc(colour)];
        for _ in 1..num_coeffs(spec.sh_degree) {
            sh.push([rest.sample(rng), rest.sample(rng), rest.sample(rng)]);
        }
        cloud.push(Gaussian {
            position: [p.x, p.y, p.z],
            rotation: quat_from_axis_angle(&random_axis(rng), rng.random_range(0.0..std::f64::consts::PI)),
            log_scale: [
                rng.random_range(spec.log_scale.0..spec.log_scale.1),
                rng.random_range(spec.log_scale.0..spec.log_scale.1),
                rng.random_range(spec.log_scale.0..spec.log_scale.1),
            ],
            opacity_logit: logit(rng.random_range(spec.opacity.0..spec.opacity.1)),
            sh,
        });
    }
    cloud
}

pub fn intrinsics(width: usize, height: usize, focal: f64) -> CameraIntrinsics {
    CameraIntrinsics::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height).unwrap()
}

/// Small sequence used where a full-size reconstruction is not needed.
pub fn small_sequence() -> SynthConfig {
    SynthConfig {
        frames: 6,
        width: 32,
        height: 24,
        focal: 16.0,
        gaussians: 600,
        ..SynthConfig::default()
    }
}

pub fn quick_run() -> RunConfig {
    RunConfig {
        init_iters: 20,
        iters_pose: 10,
        iters_scene: 5,
        densify_every: 15,
        iters_test_pose: 5,
        test_every: 4,
        ..RunConfig::default()
    }
}
