use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies at camera depth {z} which is not beyond the near plane")]
    DepthBehindCamera { z: f64 },
    #[error("invalid depth value {0}")]
    InvalidDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("relative translation {norm:e} is too small to define epipolar geometry")]
    DegenerateBaseline { norm: f64 },
    #[error("no pixel with valid depth to initialize Gaussians from")]
    EmptyInit,
    #[error("cannot render an empty scene")]
    EmptyScene,
    #[error("blend records do not match the inputs passed to the backward pass")]
    StaleRenderState,
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("depth loss needs at least {required} valid pixels, got {actual}")]
    InsufficientValidPixels { required: usize, actual: usize },
    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: &'static str },
    #[error("non-finite loss while processing frame {frame}")]
    NonFiniteLoss { frame: usize },
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sequence needs at least {required} frames, got {actual}")]
    TooFewFrames { required: usize, actual: usize },
    #[error("{what}: format error at byte {offset}: {message}")]
    Format {
        what: String,
        offset: u64,
        message: String,
    },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DepthBehindCamera { .. } => "depth_behind_camera",
            Error::InvalidDepth(_) => "invalid_depth",
            Error::InvalidIntrinsics(_) => "invalid_intrinsics",
            Error::DegenerateBaseline { .. } => "degenerate_baseline",
            Error::EmptyInit => "empty_init",
            Error::EmptyScene => "empty_scene",
            Error::StaleRenderState => "stale_render_state",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InsufficientValidPixels { .. } => "insufficient_valid_pixels",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::TooFewFrames { .. } => "too_few_frames",
            Error::Format { .. } => "format_error",
            Error::MissingFile(_) => "missing_file",
            Error::Config(_) => "config_error",
            Error::Io { .. } => "io_error",
            Error::Image { .. } => "image_error",
        }
    }
}
