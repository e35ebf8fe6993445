//! On-disk formats: Middlebury `.flo` flow, PFM depth, 8-bit PNG colour,
//! plain-text intrinsics and pose lists, the binary Gaussian scene container
//! and an ASCII PLY export.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::grid::{DepthMap, Grid, RgbImage};
use crate::scene::GaussianCloud;
use crate::sh;

pub const FLO_MAGIC: f32 = 202021.25;
/// Components above this magnitude mark a pixel as having no flow.
pub const FLO_UNKNOWN_THRESHOLD: f32 = 1e9;
/// Value written for pixels without flow.
pub const FLO_UNKNOWN_VALUE: f32 = 1e10;

pub const SCENE_MAGIC: &[u8; 4] = b"FSGS";
pub const SCENE_VERSION: u32 = 1;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports the byte offset of any failure.
struct Reader<'a> {
    what: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: impl Into<String>, bytes: &'a [u8]) -> Self {
        Self {
            what: what.into(),
            bytes,
            pos: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::format(self.what.clone(), self.pos as u64, message)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(self.err(format!("unexpected end of file (needed {N} more bytes)")));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(out)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take::<4>().map(f32::from_le_bytes)
    }

    fn i32(&mut self) -> Result<i32> {
        self.take::<4>().map(i32::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

// --- Middlebury flow ---------------------------------------------------------

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (uv, valid) in flow.uv.as_slice().iter().zip(flow.valid.as_slice()) {
        let (u, v) = if *valid {
            (uv[0] as f32, uv[1] as f32)
        } else {
            (FLO_UNKNOWN_VALUE, FLO_UNKNOWN_VALUE)
        };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], what: &str) -> Result<FlowField> {
    let mut r = Reader::new(what, bytes);
    let magic = r.f32()?;
    if magic != FLO_MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let w = r.i32()?;
    let h = r.i32()?;
    if w <= 0 || h <= 0 {
        r.pos -= 8;
        return Err(r.err(format!("invalid dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if r.remaining() < 8 * w * h {
        r.pos = bytes.len();
        return Err(r.err(format!("truncated payload: {w}x{h} flow needs {} bytes", 12 + 8 * w * h)));
    }
    let mut uv = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let u = r.f32()?;
        let v = r.f32()?;
        let ok = u.is_finite() && v.is_finite() && u.abs() <= FLO_UNKNOWN_THRESHOLD && v.abs() <= FLO_UNKNOWN_THRESHOLD;
        uv.push(if ok { [u as f64, v as f64] } else { [0.0, 0.0] });
        valid.push(ok);
    }
    Ok(FlowField {
        uv: Grid::from_vec(w, h, uv)?,
        valid: Grid::from_vec(w, h, valid)?,
    })
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    decode_flo(&read_bytes(path)?, &path.display().to_string())
}

pub fn save_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write_bytes(path, &encode_flo(flow))
}

// --- PFM depth -----------------------------------------------------------------

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*depth.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], what: &str) -> Result<DepthMap> {
    let mut r = Reader::new(what, bytes);
    let mut tokens = Vec::with_capacity(4);
    // Four whitespace-separated header tokens, then exactly one whitespace byte.
    while tokens.len() < 4 {
        while r.pos < bytes.len() && bytes[r.pos].is_ascii_whitespace() {
            r.pos += 1;
        }
        let start = r.pos;
        while r.pos < bytes.len() && !bytes[r.pos].is_ascii_whitespace() {
            r.pos += 1;
        }
        if start == r.pos {
            return Err(r.err("truncated header"));
        }
        tokens.push((start, String::from_utf8_lossy(&bytes[start..r.pos]).into_owned()));
    }
    if r.pos >= bytes.len() {
        return Err(r.err("missing header terminator"));
    }
    r.pos += 1;
    let bad = |offset: usize, message: String| Error::format(what, offset as u64, message);
    let (off, magic) = &tokens[0];
    if magic != "Pf" {
        return Err(bad(*off, format!("expected single-channel `Pf`, found `{magic}`")));
    }
    let dim = |(off, tok): &(usize, String)| -> Result<usize> {
        tok.parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| bad(*off, format!("invalid dimension `{tok}`")))
    };
    let w = dim(&tokens[1])?;
    let h = dim(&tokens[2])?;
    let (off, scale_tok) = &tokens[3];
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| bad(*off, format!("invalid scale `{scale_tok}`")))?;
    let little = scale < 0.0;
    if r.remaining() < 4 * w * h {
        r.pos = bytes.len();
        return Err(r.err(format!("truncated payload: {w}x{h} map needs {} data bytes", 4 * w * h)));
    }
    let mut data = vec![0.0; w * h];
    for y in (0..h).rev() {
        for x in 0..w {
            let b = r.take::<4>()?;
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            data[y * w + x] = v as f64;
        }
    }
    Grid::from_vec(w, h, data)
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_bytes(path)?, &path.display().to_string())
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_pfm(depth))
}

// --- PNG colour ----------------------------------------------------------------

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let (w, h) = img.dims();
    let mut buf = Vec::with_capacity(3 * w * h);
    for px in img.as_slice() {
        buf.extend(px.iter().map(|v| to_u8(*v)));
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Grid::from_vec(w, h, data)
}

/// Rounds every channel to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize_u8(img: &RgbImage) -> RgbImage {
    img.map(|p| p.map(|v| to_u8(v) as f64 / 255.0))
}

// --- Text formats --------------------------------------------------------------

fn parse_numbers(line: &str, what: &str, line_offset: usize, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(what, line_offset as u64, format!("unparsable number: {e}")))?;
    if values.len() != expected {
        return Err(Error::format(
            what,
            line_offset as u64,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

/// Non-empty, non-comment lines with their byte offsets.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len();
        let line = raw.trim();
        (!line.is_empty() && !line.starts_with('#')).then_some((start, line))
    })
}

/// `fx fy cx cy width height` on a single line.
pub fn parse_intrinsics(text: &str, what: &str) -> Result<CameraIntrinsics> {
    let (offset, line) = content_lines(text)
        .next()
        .ok_or_else(|| Error::format(what, 0, "empty intrinsics file"))?;
    let v = parse_numbers(line, what, offset, 6)?;
    let dim = |x: f64| -> Result<usize> {
        if x.fract() == 0.0 && x > 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::format(what, offset as u64, format!("image dimension {x} is not a positive integer")))
        }
    };
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], dim(v[4])?, dim(v[5])?)
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_intrinsics(&text, &path.display().to_string())
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

/// One `qw qx qy qz tx ty tz` line per pose.
pub fn parse_poses(text: &str, what: &str) -> Result<Vec<PoseSE3>> {
    content_lines(text)
        .map(|(offset, line)| {
            let v = parse_numbers(line, what, offset, 7)?;
            if v.iter().any(|x| !x.is_finite()) || v[..4].iter().all(|x| *x == 0.0) {
                return Err(Error::format(what, offset as u64, "pose must be finite with a non-zero quaternion"));
            }
            Ok(PoseSE3::new([v[0], v[1], v[2], v[3]], Vector3::new(v[4], v[5], v[6])))
        })
        .collect()
}

pub fn format_poses(poses: &[PoseSE3]) -> String {
    let mut s = String::new();
    for p in poses {
        let a = p.to_array();
        // `{:?}` prints the shortest representation that parses back exactly.
        let fields: Vec<String> = a.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&fields.join(" "));
        s.push('\n');
    }
    s
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, &path.display().to_string())
}

pub fn save_poses(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    write_bytes(path, format_poses(poses).as_bytes())
}

// --- Gaussian scene container ----------------------------------------------------

/// Header, then column-major little-endian `f32` arrays: positions (3),
/// rotations `wxyz` (4), log-scales (3), opacity logits (1) and SH
/// coefficients (3 per coefficient, coefficient-major). The SH degree follows
/// from the payload length.
pub fn encode_scene(cloud: &GaussianCloud) -> Vec<u8> {
    let n = cloud.len();
    let nc = cloud.coeffs_per_gaussian();
    let mut out = Vec::with_capacity(16 + 4 * n * (11 + 3 * nc));
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for c in 0..3 {
        cloud.positions.iter().for_each(|p| put(p[c]));
    }
    for c in 0..4 {
        cloud.rotations.iter().for_each(|q| put(q[c]));
    }
    for c in 0..3 {
        cloud.log_scales.iter().for_each(|s| put(s[c]));
    }
    cloud.opacity_logits.iter().for_each(|o| put(*o));
    for k in 0..nc {
        for ch in 0..3 {
            (0..n).for_each(|i| put(cloud.sh[i * nc + k][ch]));
        }
    }
    out
}

pub fn decode_scene(bytes: &[u8], what: &str) -> Result<GaussianCloud> {
    let mut r = Reader::new(what, bytes);
    let magic = r.take::<4>()?;
    if &magic != SCENE_MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic bytes {magic:?}")));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n = r.u64()? as usize;
    if n == 0 {
        r.pos -= 8;
        return Err(r.err("scene holds no Gaussians"));
    }
    let floats = r.remaining() / 4;
    let per = floats / n;
    let degree = (r.remaining().is_multiple_of(4) && floats.is_multiple_of(n) && per > 11 && (per - 11).is_multiple_of(3))
        .then(|| sh::degree_for_coeffs((per - 11) / 3))
        .flatten()
        .ok_or_else(|| {
            Error::format(
                what,
                r.pos as u64,
                format!("payload of {} bytes does not hold {n} Gaussians of any supported SH degree", r.remaining()),
            )
        })?;
    let nc = sh::num_coeffs(degree);
    let column = |r: &mut Reader| -> Result<Vec<f64>> { (0..n).map(|_| r.f32().map(|v| v as f64)).collect() };
    let mut positions = vec![[0.0; 3]; n];
    for c in 0..3 {
        for (p, v) in positions.iter_mut().zip(column(&mut r)?) {
            p[c] = v;
        }
    }
    let mut rotations = vec![[0.0; 4]; n];
    for c in 0..4 {
        for (q, v) in rotations.iter_mut().zip(column(&mut r)?) {
            q[c] = v;
        }
    }
    let mut log_scales = vec![[0.0; 3]; n];
    for c in 0..3 {
        for (s, v) in log_scales.iter_mut().zip(column(&mut r)?) {
            s[c] = v;
        }
    }
    let opacity_logits = column(&mut r)?;
    let mut coeffs = vec![[0.0; 3]; n * nc];
    for k in 0..nc {
        for ch in 0..3 {
            for (i, v) in column(&mut r)?.into_iter().enumerate() {
                coeffs[i * nc + k][ch] = v;
            }
        }
    }
    let cloud = GaussianCloud::from_parts(positions, rotations, log_scales, opacity_logits, coeffs, degree)?;
    if !cloud.all_finite() {
        return Err(Error::format(what, 16, "non-finite parameter"));
    }
    Ok(cloud)
}

pub fn save_scene(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_bytes(path, &encode_scene(cloud))
}

pub fn load_scene(path: &Path) -> Result<GaussianCloud> {
    decode_scene(&read_bytes(path)?, &path.display().to_string())
}

/// ASCII PLY with positions and 8-bit base colours.
pub fn export_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let mut out = Vec::new();
    let mut body = || -> std::io::Result<()> {
        writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
        writeln!(out, "property float x\nproperty float y\nproperty float z")?;
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
        for i in 0..cloud.len() {
            let p = cloud.positions[i];
            let c = cloud.dc_color(i);
            writeln!(out, "{} {} {} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, to_u8(c[0]), to_u8(c[1]), to_u8(c[2]))?;
        }
        Ok(())
    };
    body().map_err(|e| Error::io(path, e))?;
    write_bytes(path, &out)
}
