//! `flowsplat` command-line front end.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowsplat::config::RunConfig;
use flowsplat::dataset::Sequence;
use flowsplat::formats;
use flowsplat::geometry::{CameraIntrinsics, PoseSE3};
use flowsplat::metrics::{evaluate_trajectory, TrajectoryMetrics};
use flowsplat::pipeline::{evaluate_nvs, frame_roles, reconstruct, FrameRole, NvsMetrics, RunLog};
use flowsplat::rasterizer::render;
use flowsplat::scene::GaussianCloud;
use flowsplat::synthetic::{generate_synthetic, SynthConfig, Texture};
use flowsplat::Error;
use log::info;
use serde::Serialize;
use serde_json::json;

/// Version of the `metrics.json` and `run.json` layouts.
const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "flowsplat", version, about = "Pose-free Gaussian splatting guided by optical flow")]
struct Cli {
    /// Worker threads for rendering and optimisation [default: all cores].
    #[arg(long, global = true)]
    threads: Option<NonZeroUsize>,
    /// Log verbosity: off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate camera poses and a Gaussian scene from a frame sequence.
    Reconstruct(ReconstructArgs),
    /// Render a scene file at every pose of a trajectory file.
    Render(RenderArgs),
    /// Score a scene against a dataset and write metrics JSON.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset directory (images/, depth/, flow/, intrinsics.txt).
    input: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pose optimisation iterations per frame.
    #[arg(long)]
    iters_pose: Option<usize>,
    /// Scene iterations after each posed frame.
    #[arg(long)]
    iters_scene: Option<usize>,
    /// Scene iterations on the first frame before tracking starts.
    #[arg(long)]
    init_iters: Option<usize>,
    /// Hold out every n-th frame for evaluation; 0 trains on all frames.
    #[arg(long)]
    test_every: Option<usize>,
    #[arg(long)]
    sh_degree: Option<usize>,
    /// Weight of the flow term in the pose objective.
    #[arg(long)]
    lambda_flow: Option<f64>,
    /// Disable the epipolar consistency mask on prior flow.
    #[arg(long)]
    no_rigid_mask: bool,
    /// Also write renders at every estimated pose to `renders/`.
    #[arg(long)]
    save_renders: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene file written by `reconstruct` or `synth`.
    scene: PathBuf,
    /// Pose file, one `qw qx qy qz tx ty tz` world-to-camera pose per line.
    #[arg(long)]
    poses: PathBuf,
    /// Intrinsics file, `fx fy cx cy width height`.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Output directory for `NNNNNN.png` colour and `NNNNNN.pfm` depth.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Scene file to score.
    scene: PathBuf,
    /// Dataset directory holding the reference images.
    dataset: PathBuf,
    /// Camera poses to render from [default: the dataset's gt_poses.txt].
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Frames to score.
    #[arg(long, value_enum, default_value = "all")]
    split: Split,
    /// Held-out cadence defining the train and test splits.
    #[arg(long, default_value_t = 8)]
    test_every: usize,
    /// Converts world units to millimetres in trajectory metrics.
    #[arg(long, default_value_t = 1.0)]
    units_to_mm: f64,
    /// Metrics file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TextureArg {
    Textured,
    LowTexture,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// TOML scene configuration; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum)]
    texture: Option<TextureArg>,
    /// Share of flow pixels replaced by off-epipolar outliers.
    #[arg(long)]
    outlier_fraction: Option<f64>,
}

#[derive(Serialize)]
struct MetricsReport {
    schema_version: u32,
    frames: usize,
    gaussians: usize,
    /// Image quality per split name.
    nvs: BTreeMap<String, NvsMetrics>,
    trajectory: Option<TrajectoryMetrics>,
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    schema_version: u32,
    tool_version: &'static str,
    input: String,
    threads: usize,
    overrides: Vec<String>,
    config: &'a RunConfig,
    roles: &'a [FrameRole],
    log: &'a RunLog,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.get())
            .build_global()
            .context("starting the worker pool")?;
    }
    match cli.command {
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// One JSON line describing the failure, tagged with the engine error kind
/// when there is one.
fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let engine = err.chain().find_map(|e| e.downcast_ref::<Error>());
    let mut record = json!({
        "kind": engine.map_or("cli_error", Error::kind),
        "message": format!("{err:#}"),
    });
    match engine {
        Some(Error::MissingFile(p) | Error::Io { path: p, .. } | Error::Image { path: p, .. }) => {
            record["path"] = json!(p.display().to_string());
        }
        Some(Error::Format { what, offset, .. }) => {
            record["path"] = json!(what);
            record["offset"] = json!(offset);
        }
        Some(Error::NonFiniteLoss { frame }) => record["frame"] = json!(frame),
        _ => {}
    }
    json!({ "error": record })
}

fn cmd_reconstruct(a: &ReconstructArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    let mut set = |name: &str, value: String| overrides.push(format!("{name}={value}"));
    if let Some(v) = a.seed {
        cfg.seed = v;
        set("seed", v.to_string());
    }
    if let Some(v) = a.iters_pose {
        cfg.iters_pose = v;
        set("iters_pose", v.to_string());
    }
    if let Some(v) = a.iters_scene {
        cfg.iters_scene = v;
        set("iters_scene", v.to_string());
    }
    if let Some(v) = a.init_iters {
        cfg.init_iters = v;
        set("init_iters", v.to_string());
    }
    if let Some(v) = a.test_every {
        cfg.test_every = v;
        set("test_every", v.to_string());
    }
    if let Some(v) = a.sh_degree {
        cfg.sh_degree = v;
        set("sh_degree", v.to_string());
    }
    if let Some(v) = a.lambda_flow {
        cfg.weights.lambda_flow = v;
        set("weights.lambda_flow", v.to_string());
    }
    if a.no_rigid_mask {
        cfg.use_rigid_mask = false;
        set("use_rigid_mask", "false".into());
    }
    cfg.validate()?;

    let seq = Sequence::load(&a.input)?;
    ensure_outside(&a.input, &a.out)?;
    create_dir(&a.out)?;
    info!("{} frames of {}x{} from {}", seq.len(), seq.k.width, seq.k.height, a.input.display());

    let mut rec = reconstruct(&seq, &cfg)?;
    // Everything below sees exactly what the output files hold.
    rec.cloud.quantize_f32();
    let poses = formats::parse_poses(&formats::format_poses(&rec.poses), "estimated trajectory")?;
    formats::save_scene(&a.out.join("scene.fsgs"), &rec.cloud)?;
    formats::export_ply(&a.out.join("scene.ply"), &rec.cloud)?;
    formats::save_poses(&a.out.join("trajectory.txt"), &poses)?;

    let split = |role: FrameRole| -> Vec<usize> { (0..seq.len()).filter(|&i| rec.roles[i] == role).collect() };
    let mut nvs = BTreeMap::new();
    for (name, role) in [("train", FrameRole::Train), ("test", FrameRole::Test)] {
        let frames = split(role);
        if !frames.is_empty() {
            nvs.insert(name.to_string(), evaluate_nvs(&rec.cloud, &seq, &poses, &frames)?);
        }
    }
    let trajectory = seq
        .gt_poses
        .as_ref()
        .map(|gt| evaluate_trajectory(&poses, gt, cfg.units_to_mm))
        .transpose()?;
    let report = MetricsReport {
        schema_version: SCHEMA_VERSION,
        frames: seq.len(),
        gaussians: rec.cloud.len(),
        nvs,
        trajectory,
    };
    write_json(&a.out.join("metrics.json"), &report)?;

    let config_path = a.out.join("config.toml");
    fs::write(&config_path, cfg.to_toml_string()).map_err(|e| io_error(&config_path, e))?;
    let meta = RunMetadata {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        input: a.input.display().to_string(),
        threads: rayon::current_num_threads(),
        overrides,
        config: &cfg,
        roles: &rec.roles,
        log: &rec.log,
    };
    write_json(&a.out.join("run.json"), &meta)?;

    if a.save_renders {
        let dir = a.out.join("renders");
        create_dir(&dir)?;
        render_all(&rec.cloud, &poses, &seq.k, &dir)?;
    }
    if let Some(t) = &report.trajectory {
        info!("ATE {:.4} mm, RPE {:.4} mm / {:.4} deg", t.ate, t.rpe_t, t.rpe_r);
    }
    info!("wrote {} Gaussians to {}", rec.cloud.len(), a.out.display());
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> anyhow::Result<()> {
    let cloud = formats::load_scene(&a.scene)?;
    let k = formats::load_intrinsics(&a.intrinsics)?;
    let poses = formats::load_poses(&a.poses)?;
    if poses.is_empty() {
        return Err(Error::Format {
            what: a.poses.display().to_string(),
            offset: 0,
            message: "no poses in file".into(),
        }
        .into());
    }
    create_dir(&a.out)?;
    render_all(&cloud, &poses, &k, &a.out)?;
    info!("rendered {} views to {}", poses.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    if !(a.units_to_mm > 0.0) || !a.units_to_mm.is_finite() {
        return Err(Error::Config(format!("units_to_mm must be positive, got {}", a.units_to_mm)).into());
    }
    let cloud = formats::load_scene(&a.scene)?;
    let seq = Sequence::load(&a.dataset)?;
    let poses = match (&a.poses, &seq.gt_poses) {
        (Some(p), _) => formats::load_poses(p)?,
        (None, Some(gt)) => gt.clone(),
        (None, None) => return Err(Error::MissingFile(a.dataset.join("gt_poses.txt")).into()),
    };
    if poses.len() != seq.len() {
        return Err(Error::LengthMismatch(poses.len(), seq.len()).into());
    }
    if a.test_every == 1 {
        return Err(Error::Config("test_every = 1 would hold out every frame".into()).into());
    }
    let roles = frame_roles(seq.len(), a.test_every);
    let (name, frames): (&str, Vec<usize>) = match a.split {
        Split::All => ("all", (0..seq.len()).collect()),
        Split::Train => ("train", (0..seq.len()).filter(|&i| roles[i] == FrameRole::Train).collect()),
        Split::Test => ("test", (0..seq.len()).filter(|&i| roles[i] == FrameRole::Test).collect()),
    };
    if frames.is_empty() {
        return Err(Error::Config(format!("split `{name}` selects no frames")).into());
    }
    let metrics = evaluate_nvs(&cloud, &seq, &poses, &frames)?;
    let trajectory = seq
        .gt_poses
        .as_ref()
        .map(|gt| evaluate_trajectory(&poses, gt, a.units_to_mm))
        .transpose()?;
    info!("{name}: PSNR {:.3} dB, SSIM {:.4}", metrics.mean_psnr, metrics.mean_ssim);
    let report = MetricsReport {
        schema_version: SCHEMA_VERSION,
        frames: seq.len(),
        gaussians: cloud.len(),
        nvs: BTreeMap::from([(name.to_string(), metrics)]),
        trajectory,
    };
    ensure_outside(&a.dataset, &a.out)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&a.out, &report)
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(t) = a.texture {
        cfg.texture = match t {
            TextureArg::Textured => Texture::Textured,
            TextureArg::LowTexture => Texture::LowTexture,
        };
    }
    if let Some(v) = a.outlier_fraction {
        cfg.outlier_fraction = v;
    }
    cfg.validate()?;
    let data = generate_synthetic(&cfg)?;
    create_dir(&a.out)?;
    data.sequence.save(&a.out)?;
    formats::save_scene(&a.out.join("gt_scene.fsgs"), &data.gt_cloud)?;
    let config_path = a.out.join("synth.toml");
    fs::write(&config_path, cfg.to_toml_string()).map_err(|e| io_error(&config_path, e))?;
    info!("wrote {} frames to {}", cfg.frames, a.out.display());
    Ok(())
}

fn render_all(cloud: &GaussianCloud, poses: &[PoseSE3], k: &CameraIntrinsics, dir: &Path) -> anyhow::Result<()> {
    for (i, pose) in poses.iter().enumerate() {
        let out = render(cloud, pose, k)?;
        formats::save_png(&dir.join(format!("{i:06}.png")), &out.color)?;
        formats::save_depth(&dir.join(format!("{i:06}.pfm")), &out.depth)?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e).into())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e).into())
}

/// Resolves symlinks and `..` for the part of `path` that exists.
fn resolve(path: &Path) -> PathBuf {
    let mut existing = path.to_path_buf();
    let mut rest = Vec::new();
    while !existing.as_os_str().is_empty() {
        if let Ok(c) = existing.canonicalize() {
            return rest.iter().rev().fold(c, |acc, part| acc.join(part));
        }
        match (existing.file_name(), existing.parent()) {
            (Some(name), Some(parent)) => {
                rest.push(name.to_os_string());
                existing = parent.to_path_buf();
            }
            _ => break,
        }
    }
    std::env::current_dir().map(|d| d.join(path)).unwrap_or_else(|_| path.to_path_buf())
}

/// Refuses outputs that would land inside an input directory.
fn ensure_outside(input: &Path, out: &Path) -> anyhow::Result<()> {
    if resolve(out).starts_with(resolve(input)) {
        return Err(Error::Config(format!(
            "output {} lies inside input directory {}",
            out.display(),
            input.display()
        ))
        .into());
    }
    Ok(())
}
