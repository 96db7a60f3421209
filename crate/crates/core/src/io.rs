//! Run configuration and on-disk formats.
//!
//! # Stack files
//!
//! All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "SSNI"
//! version      u32      1
//! width        u32
//! height       u32
//! n_frames     u64
//! scene_hash   32 bytes SHA-256 of the scene JSON
//! global_seed  u64
//! scene_len    u32
//! scene_json   scene_len bytes
//! frames       n_frames x { frame_index u64, probe u32[w*h], reference u32[w*h] }
//! ```
//!
//! Grids are stored row-major. The embedded scene makes a stack file
//! self-contained; its hash is checked on every read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Roi;
use crate::grid::Grid;
use crate::imaging::{phantom_phi, default_stroke, EstimateMap};
use crate::physics::{EstimatorKind, NoiseModel};
use crate::simkernel::{min_guard_band, pair_rate_for, FramePair, FrameStack, MaskImage, Scene};
use crate::sweeps::DEFAULT_K_LIST;

pub const STACK_MAGIC: &[u8; 4] = b"SSNI";
pub const STACK_FORMAT_VERSION: u32 = 1;

/// `out.ssni` -> `out.ssni.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn parse_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Read a JSON document; syntax and schema errors carry line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        parse_err(path, format!("line {} column {}", e.line(), e.column()), e.to_string())
    })
}

// ---------------------------------------------------------------------------
// Run configuration

/// Sample placed in front of the probe arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// No sample.
    #[default]
    None,
    Uniform {
        alpha: f64,
    },
    Phi {
        alpha_level: f64,
        stroke_px: Option<usize>,
    },
    /// PGM (with its JSON sidecar) or CSV mask file. Relative paths resolve
    /// against the configuration file's directory.
    File {
        path: PathBuf,
    },
}

fn default_noise() -> NoiseModel {
    NoiseModel::Poisson
}

fn default_k_list() -> Vec<usize> {
    DEFAULT_K_LIST.to_vec()
}

fn default_kinds() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

fn default_n_detected_binning() -> usize {
    1
}

/// Everything needed to regenerate a run.
///
/// The source brightness is given either directly as `pair_rate` or as the
/// detected probe photons `n_detected` per `n_detected_binning` bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub pixel_pitch: f64,
    pub corr_radius_r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_detected: Option<f64>,
    #[serde(default = "default_n_detected_binning")]
    pub n_detected_binning: usize,
    pub eta_d_probe: f64,
    /// Defaults to `eta_d_probe`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_d_ref: Option<f64>,
    #[serde(default = "default_noise")]
    pub noise: NoiseModel,
    /// Defaults to the smallest admissible band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard_band: Option<usize>,
    #[serde(default)]
    pub mask: MaskSpec,
    pub n_frames: usize,
    pub global_seed: u64,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_kinds")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Roi>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Parse a configuration document. Any failure is a configuration error.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::config(format!("{}: not UTF-8", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn pair_rate(&self) -> Result<f64> {
        match (self.pair_rate, self.n_detected) {
            (Some(rate), None) => Ok(rate),
            (None, Some(n)) => {
                if self.n_detected_binning < 1 {
                    return Err(Error::config("n_detected_binning must be >= 1"));
                }
                Ok(pair_rate_for(n, self.n_detected_binning, self.eta_d_probe))
            }
            _ => Err(Error::config("give exactly one of pair_rate and n_detected")),
        }
    }

    /// Build and validate the scene. `base_dir` resolves relative mask paths.
    pub fn scene(&self, base_dir: &Path) -> Result<Scene> {
        let mut scene = Scene::new(
            self.grid_w,
            self.grid_h,
            self.pixel_pitch,
            self.corr_radius_r,
            self.pair_rate()?,
            self.eta_d_probe,
        );
        scene.eta_d_ref = self.eta_d_ref.unwrap_or(self.eta_d_probe);
        scene.noise = self.noise;
        if let Some(g) = self.guard_band {
            scene.guard_band = g;
        } else if self.pixel_pitch > 0.0 && self.corr_radius_r > 0.0 {
            scene.guard_band = min_guard_band(self.pixel_pitch, self.corr_radius_r);
        }
        if self.grid_w > 0 && self.grid_h > 0 {
            scene.mask = match &self.mask {
                MaskSpec::None => MaskImage::zeros(self.grid_w, self.grid_h),
                MaskSpec::Uniform { alpha } => {
                    MaskImage::uniform(self.grid_w, self.grid_h, *alpha).map_err(|e| Error::config(e.to_string()))?
                }
                MaskSpec::Phi { alpha_level, stroke_px } => phantom_phi(
                    self.grid_w,
                    self.grid_h,
                    *alpha_level,
                    stroke_px.unwrap_or_else(|| default_stroke(self.grid_w, self.grid_h)),
                )
                .map_err(|e| Error::config(e.to_string()))?,
                MaskSpec::File { path } => read_mask(&base_dir.join(path))?,
            };
        }
        scene.validate()?;
        self.validate_analysis(&scene)?;
        Ok(scene)
    }

    fn validate_analysis(&self, scene: &Scene) -> Result<()> {
        if self.n_frames < 1 {
            return Err(Error::config("n_frames must be >= 1"));
        }
        if self.k_list.iter().any(|&k| k < 1 || k > scene.grid_w.min(scene.grid_h)) {
            return Err(Error::config(format!(
                "k_list entries must lie in [1, {}]",
                scene.grid_w.min(scene.grid_h)
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::config("no estimator selected"));
        }
        if let Some(roi) = self.roi {
            if roi.width == 0 || roi.height == 0 || roi.x + roi.width > scene.grid_w || roi.y + roi.height > scene.grid_h {
                return Err(Error::config(format!("roi {roi:?} lies outside the analysis region")));
            }
        }
        Ok(())
    }

    pub fn roi_for(&self, scene: &Scene) -> Roi {
        self.roi.unwrap_or_else(|| Roi::full(scene))
    }
}

// ---------------------------------------------------------------------------
// Stack files

pub fn encode_stack(stack: &FrameStack) -> Result<Vec<u8>> {
    let scene = stack.scene();
    let json = serde_json::to_vec(scene)?;
    let (w, h) = (scene.grid_w, scene.grid_h);
    let mut out = Vec::with_capacity(64 + json.len() + stack.len() * (8 + 8 * w * h));
    out.extend_from_slice(STACK_MAGIC);
    out.extend_from_slice(&STACK_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(stack.len() as u64).to_le_bytes());
    out.extend_from_slice(&scene.hash());
    out.extend_from_slice(&stack.global_seed().to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for f in stack.frames() {
        out.extend_from_slice(&f.frame_index.to_le_bytes());
        for g in [&f.probe, &f.reference] {
            for c in &g.data {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(parse_err(
                self.path,
                format!("byte offset {}", self.pos),
                format!("truncated file while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn err(&self, at: usize, message: impl Into<String>) -> Error {
        parse_err(self.path, format!("byte offset {at}"), message)
    }
}

/// Decode a stack file. When `expected` is given its hash must match the
/// embedded scene.
pub fn decode_stack(bytes: &[u8], path: &Path, expected: Option<&Scene>) -> Result<FrameStack> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != STACK_MAGIC {
        return Err(r.err(0, "not a stack file (bad magic)"));
    }
    let version = r.u32("format version")?;
    if version != STACK_FORMAT_VERSION {
        return Err(r.err(4, format!("unsupported format version {version}")));
    }
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let n = r.u64("frame count")?;
    let hash: [u8; 32] = r.take(32, "scene hash")?.try_into().unwrap();
    let seed = r.u64("global seed")?;
    let json_len = r.u32("scene length")? as usize;
    let json_at = r.pos;
    let scene: Scene = serde_json::from_slice(r.take(json_len, "scene")?)
        .map_err(|e| r.err(json_at, format!("embedded scene: {e}")))?;
    if scene.hash() != hash {
        return Err(r.err(json_at, "embedded scene does not match the header hash"));
    }
    if scene.grid_w != w || scene.grid_h != h {
        return Err(r.err(8, "header dimensions disagree with the embedded scene"));
    }
    if let Some(exp) = expected {
        if exp.hash() != hash {
            return Err(Error::config(format!(
                "{}: stack was generated from a different scene",
                path.display()
            )));
        }
    }
    let frame_bytes = 8 + 8 * w * h;
    let remaining = (bytes.len() - r.pos) as u64;
    if remaining != n.saturating_mul(frame_bytes as u64) {
        return Err(r.err(
            r.pos,
            format!("expected {n} frames of {frame_bytes} bytes, found {remaining} bytes"),
        ));
    }
    let mut frames = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let idx = r.u64("frame index")?;
        let mut grid = || -> Result<Grid<u32>> {
            let raw = r.take(4 * w * h, "counts")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Grid::from_vec(w, h, data)
        };
        let probe = grid()?;
        let reference = grid()?;
        frames.push(FramePair::new(probe, reference, idx, seed)?);
    }
    FrameStack::new(scene, seed, frames).map_err(|e| r.err(json_at + json_len, e.to_string()))
}

pub fn write_stack(path: &Path, stack: &FrameStack) -> Result<()> {
    write_bytes(path, &encode_stack(stack)?)
}

pub fn read_stack(path: &Path, expected: Option<&Scene>) -> Result<FrameStack> {
    decode_stack(&read_bytes(path)?, path, expected)
}

// ---------------------------------------------------------------------------
// Graymaps

/// 8- or 16-bit binary graymap.
#[derive(Debug, Clone, PartialEq)]
pub struct Graymap {
    pub maxval: u16,
    pub pixels: Grid<u16>,
}

impl Graymap {
    pub fn encode(&self) -> Vec<u8> {
        let g = &self.pixels;
        let mut out = format!("P5\n{} {}\n{}\n", g.width, g.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(g.data.iter().map(|&v| v as u8));
        } else {
            for v in &g.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let err = |at: usize, m: &str| parse_err(path, format!("byte offset {at}"), m);
        if bytes.get(..2) != Some(b"P5") {
            return Err(err(0, "not a binary graymap (expected P5)"));
        }
        pos += 2;
        let mut fields = [0usize; 3];
        for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(err(start, &format!("expected {name}")));
            }
            fields[i] = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| err(start, &format!("{name} out of range")))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err(pos, "expected whitespace after maxval"));
        }
        pos += 1;
        let [w, h, maxval] = fields;
        if w == 0 || h == 0 {
            return Err(err(3, "empty image"));
        }
        if !(1..=65535).contains(&maxval) {
            return Err(err(pos - 1, "maxval must lie in [1, 65535]"));
        }
        let bpp = if maxval < 256 { 1 } else { 2 };
        let raster = &bytes[pos..];
        if raster.len() != w * h * bpp {
            return Err(err(
                pos,
                &format!("raster holds {} bytes, expected {}", raster.len(), w * h * bpp),
            ));
        }
        let data: Vec<u16> = if bpp == 1 {
            raster.iter().map(|&b| b as u16).collect()
        } else {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        if let Some(i) = data.iter().position(|&v| v as usize > maxval) {
            return Err(err(pos + i * bpp, "sample exceeds maxval"));
        }
        Ok(Self {
            maxval: maxval as u16,
            pixels: Grid::from_vec(w, h, data)?,
        })
    }
}

/// Sidecar of a mask graymap: gray level `maxval` corresponds to `alpha_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSidecar {
    pub alpha_max: f64,
}

pub fn write_mask_pgm(path: &Path, mask: &MaskImage, sixteen_bit: bool) -> Result<()> {
    let maxval: u16 = if sixteen_bit { 65535 } else { 255 };
    let alpha_max = mask.alpha.data.iter().copied().fold(0.0, f64::max);
    let scale = if alpha_max > 0.0 { maxval as f64 / alpha_max } else { 0.0 };
    let gm = Graymap {
        maxval,
        pixels: mask.alpha.map(|&a| (a * scale).round().min(maxval as f64) as u16),
    };
    write_bytes(path, &gm.encode())?;
    write_json(&sidecar_path(path), &MaskSidecar { alpha_max })
}

pub fn read_mask_pgm(path: &Path) -> Result<MaskImage> {
    let gm = Graymap::decode(&read_bytes(path)?, path)?;
    let side: MaskSidecar = read_json(&sidecar_path(path))?;
    if !(side.alpha_max.is_finite() && (0.0..=1.0).contains(&side.alpha_max)) {
        return Err(parse_err(
            &sidecar_path(path),
            "alpha_max",
            format!("alpha_max must lie in [0, 1], got {}", side.alpha_max),
        ));
    }
    let scale = side.alpha_max / gm.maxval as f64;
    MaskImage::new(gm.pixels.map(|&v| v as f64 * scale))
}

/// Rows of comma-separated absorption values, no header.
pub fn write_mask_csv(path: &Path, mask: &MaskImage) -> Result<()> {
    let a = &mask.alpha;
    let mut text = String::new();
    for row in a.data.chunks(a.width) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

pub fn parse_mask_csv(text: &str, path: &Path) -> Result<MaskImage> {
    let mut width = None;
    let mut data = Vec::new();
    let mut height = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = |col: usize| format!("line {} field {}", i + 1, col + 1);
        let mut n = 0;
        for (j, field) in line.split(',').enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, loc(j), format!("not a number: {:?}", field.trim())))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(path, loc(j), format!("absorption {v} outside [0, 1]")));
            }
            data.push(v);
            n += 1;
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(parse_err(
                    path,
                    format!("line {}", i + 1),
                    format!("row has {n} fields, expected {w}"),
                ))
            }
            _ => {}
        }
        height += 1;
    }
    let width = width.ok_or_else(|| parse_err(path, "line 1", "empty mask"))?;
    MaskImage::new(Grid::from_vec(width, height, data)?)
}

pub fn read_mask_csv(path: &Path) -> Result<MaskImage> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        parse_err(path, format!("byte offset {}", e.valid_up_to()), "not UTF-8")
    })?;
    parse_mask_csv(text, path)
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Read a mask, choosing the format by extension (`.pgm`, otherwise CSV).
pub fn read_mask(path: &Path) -> Result<MaskImage> {
    if is_pgm(path) {
        read_mask_pgm(path)
    } else {
        read_mask_csv(path)
    }
}

/// Write a mask, choosing the format by extension (`.pgm` as 16-bit,
/// otherwise CSV).
pub fn write_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    if is_pgm(path) {
        write_mask_pgm(path, mask, true)
    } else {
        write_mask_csv(path, mask)
    }
}

// ---------------------------------------------------------------------------
// Maps

/// Value range of an exported map preview.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPreviewSidecar {
    pub kind: EstimatorKind,
    pub binning_k: usize,
    pub frame_index: u64,
    /// Absorption at gray level 0.
    pub alpha_min: f64,
    /// Absorption at gray level `maxval`.
    pub alpha_max: f64,
    pub maxval: u16,
}

/// Map values as CSV rows; invalid cells are left empty.
pub fn write_map_csv(path: &Path, map: &EstimateMap) -> Result<()> {
    let g = &map.alpha;
    let mut text = String::new();
    for row in g.data.chunks(g.width) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| if v.is_nan() { String::new() } else { v.to_string() })
            .collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

/// 16-bit preview stretched over the valid value range; invalid cells are 0.
pub fn write_map_pgm(path: &Path, map: &EstimateMap) -> Result<()> {
    let valid = map.alpha.data.iter().copied().filter(|v| !v.is_nan());
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let maxval = u16::MAX;
    let scale = if hi > lo { maxval as f64 / (hi - lo) } else { 0.0 };
    let gm = Graymap {
        maxval,
        pixels: map
            .alpha
            .map(|&v| if v.is_nan() { 0 } else { ((v - lo) * scale).round() as u16 }),
    };
    write_bytes(path, &gm.encode())?;
    write_json(
        &sidecar_path(path),
        &MapPreviewSidecar {
            kind: map.kind,
            binning_k: map.binning_k,
            frame_index: map.frame_index,
            alpha_min: lo,
            alpha_max: hi,
            maxval,
        },
    )
}
