//! Run configuration: every tunable of a reconstruction, loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optimizer::{SceneLearningRates, POSE_LR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds frame sampling and densification.
    pub seed: u64,
    pub sh_degree: usize,
    /// Pixel stride when seeding Gaussians from the first depth map.
    pub init_stride: usize,
    pub init_opacity: f64,
    /// Scene iterations on the first frame before any pose is estimated.
    pub init_iters: usize,
    pub iters_pose: usize,
    /// Scene iterations after each newly posed frame.
    pub iters_scene: usize,
    /// Scene iterations between densification passes; 0 disables it.
    pub densify_every: usize,
    pub opacity_floor: f64,
    pub grad_threshold: f64,
    /// Gaussians larger than this share of the scene extent are split rather than cloned.
    pub percent_dense: f64,
    /// Visibility threshold on accumulated opacity.
    pub gamma: f64,
    /// Rigid-mask threshold on the Sampson distance, in px².
    pub beta: f64,
    pub use_rigid_mask: bool,
    pub lr_pose: f64,
    /// Length unit for pose translation steps; unset means twice the median
    /// prior depth of the first frame.
    pub pose_translation_scale: Option<f64>,
    pub weights: LossWeights,
    pub scene_lr: SceneLearningRates,
    /// Every `test_every`-th frame is held out for evaluation; 0 keeps all.
    pub test_every: usize,
    /// Iterations used to pose held-out frames against the final scene.
    pub iters_test_pose: usize,
    /// Converts world units to millimetres in trajectory metrics.
    pub units_to_mm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sh_degree: 0,
            init_stride: 2,
            init_opacity: 0.1,
            init_iters: 200,
            iters_pose: 30,
            iters_scene: 30,
            densify_every: 100,
            opacity_floor: 0.005,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            gamma: 0.9,
            beta: 0.5,
            use_rigid_mask: true,
            lr_pose: POSE_LR,
            pose_translation_scale: None,
            weights: LossWeights::default(),
            scene_lr: SceneLearningRates::default(),
            test_every: 8,
            iters_test_pose: 60,
            units_to_mm: 1.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return bad(format!("sh_degree {} exceeds {}", self.sh_degree, crate::sh::MAX_DEGREE));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad(format!("init_opacity {} must lie in (0, 1)", self.init_opacity));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} must lie in [0, 1)", self.gamma));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lr_pose", self.lr_pose),
            ("units_to_mm", self.units_to_mm),
            ("percent_dense", self.percent_dense),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(v) = self.pose_translation_scale {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("pose_translation_scale must be positive, got {v}"));
            }
        }
        for (name, v) in [("opacity_floor", self.opacity_floor), ("grad_threshold", self.grad_threshold)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.test_every == 1 {
            return bad("test_every = 1 would hold out every frame".into());
        }
        self.weights.validate()
    }
}
