//! Input sequences and their directory layout:
//!
//! ```text
//! images/000000.png      colour frames
//! depth/000000.pfm       prior depth (required for frame 0)
//! flow/000000_fwd.flo    prior flow from frame t to t + 1
//! intrinsics.txt         fx fy cx cy width height
//! gt_poses.txt           optional, one `qw qx qy qz tx ty tz` line per frame
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{ensure_flow_dims, FlowField};
use crate::formats;
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::grid::{DepthMap, RgbImage};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub image: RgbImage,
    pub depth: Option<DepthMap>,
    /// Prior flow into the next frame; absent for the last frame.
    pub flow_forward: Option<FlowField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub k: CameraIntrinsics,
    pub frames: Vec<FrameData>,
    pub gt_poses: Option<Vec<PoseSE3>>,
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:06}.png"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("depth").join(format!("{i:06}.pfm"))
}

pub fn flow_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("flow").join(format!("{i:06}_fwd.flo"))
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks that every frame matches the intrinsics and that the ground
    /// truth, if any, covers every frame.
    pub fn validate(&self) -> Result<()> {
        let dims = self.k.dims();
        for f in &self.frames {
            f.image.ensure_dims(dims)?;
            if let Some(d) = &f.depth {
                d.ensure_dims(dims)?;
            }
            if let Some(fl) = &f.flow_forward {
                ensure_flow_dims(fl, dims)?;
            }
        }
        if let Some(gt) = &self.gt_poses {
            if gt.len() != self.frames.len() {
                return Err(Error::LengthMismatch(gt.len(), self.frames.len()));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let k = formats::load_intrinsics(&dir.join("intrinsics.txt"))?;
        let mut frames = Vec::new();
        loop {
            let i = frames.len();
            let img = image_path(dir, i);
            if !img.exists() {
                break;
            }
            let depth_file = depth_path(dir, i);
            let depth = if depth_file.exists() {
                Some(formats::load_depth(&depth_file)?)
            } else if i == 0 {
                return Err(Error::MissingFile(depth_file));
            } else {
                None
            };
            let flow_file = flow_path(dir, i);
            let flow_forward = flow_file.exists().then(|| formats::load_flow(&flow_file)).transpose()?;
            frames.push(FrameData {
                image: formats::load_png(&img)?,
                depth,
                flow_forward,
            });
        }
        if frames.is_empty() {
            return Err(Error::MissingFile(image_path(dir, 0)));
        }
        let gt_file = dir.join("gt_poses.txt");
        let gt_poses = gt_file.exists().then(|| formats::load_poses(&gt_file)).transpose()?;
        let seq = Self { k, frames, gt_poses };
        seq.validate()?;
        Ok(seq)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "depth", "flow"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let intr = dir.join("intrinsics.txt");
        fs::write(&intr, formats::format_intrinsics(&self.k)).map_err(|e| Error::io(&intr, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            formats::save_png(&image_path(dir, i), &f.image)?;
            if let Some(d) = &f.depth {
                formats::save_depth(&depth_path(dir, i), d)?;
            }
            if let Some(fl) = &f.flow_forward {
                formats::save_flow(&flow_path(dir, i), fl)?;
            }
        }
        if let Some(gt) = &self.gt_poses {
            formats::save_poses(&dir.join("gt_poses.txt"), gt)?;
        }
        Ok(())
    }
}
