//! Dataset ingestion (TUM RGB-D layout plus instance masks), PNG helpers and
//! trajectory files.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;
use crate::objects::Detection;
use crate::pipeline::{Frame, PoseTrack};

/// Maximum timestamp difference when pairing streams, in seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Format a timestamp the way file names and trajectory lines use it.
pub fn format_timestamp(t: f64) -> String {
    format!("{t:.6}")
}

// ---------------------------------------------------------------------------
// PNG

/// Read a single-channel PNG (8 or 16 bit) as raw integer samples.
pub fn read_gray_png(path: &Path) -> Result<Image<u16>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(image_err(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<u16> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as u16).collect(),
        other => return Err(image_err(path, format!("unsupported bit depth {other:?}"))),
    };
    if data.len() != w * h {
        return Err(image_err(path, "truncated image data"));
    }
    Ok(Image::from_vec(w, h, data))
}

fn create_parent(path: &Path) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    Ok(())
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<Vec<u8>>,
    bytes: &[u8],
) -> Result<(), IoError> {
    create_parent(path)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn write_gray16_png(path: &Path, img: &Image<u16>) -> Result<(), IoError> {
    let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, img.width(), img.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, None, &bytes)
}

pub fn write_gray8_png(path: &Path, img: &Image<u8>) -> Result<(), IoError> {
    write_png(path, img.width(), img.height(), png::ColorType::Grayscale, png::BitDepth::Eight, None, img.data())
}

/// 8-bit palette image; index 0 is black.
pub fn write_indexed_png(path: &Path, img: &Image<u8>) -> Result<(), IoError> {
    let mut palette = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        if i == 0 {
            palette.extend([0, 0, 0]);
        } else {
            // well-spread hues from a multiplicative hash
            let h = i.wrapping_mul(2654435761);
            palette.extend([(h >> 24) as u8 | 0x40, (h >> 16) as u8 | 0x40, (h >> 8) as u8 | 0x40]);
        }
    }
    write_png(
        path,
        img.width(),
        img.height(),
        png::ColorType::Indexed,
        png::BitDepth::Eight,
        Some(palette),
        img.data(),
    )
}

/// Read a 16-bit depth PNG; `scale` raw units per meter, 0 = invalid.
pub fn read_depth_png(path: &Path, scale: f64) -> Result<Image<f32>, IoError> {
    let raw = read_gray_png(path)?;
    Ok(raw.map(|v| (v as f64 / scale) as f32))
}

/// Write depth in meters as 16-bit PNG; non-positive or non-finite values
/// become 0, values beyond the range saturate.
pub fn write_depth_png(path: &Path, depth: &Image<f32>, scale: f64) -> Result<(), IoError> {
    let raw = depth.map(|d| {
        if d.is_finite() && d > 0.0 {
            (d as f64 * scale).round().clamp(0.0, u16::MAX as f64) as u16
        } else {
            0
        }
    });
    write_gray16_png(path, &raw)
}

// ---------------------------------------------------------------------------
// Masks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub id: u16,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskMetaFile {
    instances: Vec<InstanceMeta>,
}

/// Instance segmentation for one frame: an id map (0 = none) and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub instance_map: Image<u16>,
    pub meta: Vec<InstanceMeta>,
}

impl MaskSet {
    /// Every nonzero id in the map must appear in `meta` exactly once.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for m in &self.meta {
            if m.id == 0 {
                return Err("instance id 0 is reserved".into());
            }
            if !seen.insert(m.id) {
                return Err(format!("instance {} listed twice", m.id));
            }
        }
        let present: BTreeSet<u16> = self.instance_map.data().iter().copied().filter(|&v| v != 0).collect();
        if let Some(id) = present.difference(&seen).next() {
            return Err(format!("instance {id} in the map has no metadata"));
        }
        Ok(())
    }

    /// One detection per listed instance with a nonempty mask.
    pub fn detections(&self) -> Vec<Detection> {
        self.meta
            .iter()
            .filter_map(|m| {
                let mask = self.instance_map.map(|v| v == m.id);
                let det = Detection {
                    mask,
                    class_label: m.label.clone(),
                    score: m.score,
                };
                (det.pixel_count() > 0).then_some(det)
            })
            .collect()
    }

    pub fn read(png_path: &Path, json_path: &Path) -> Result<Self, IoError> {
        let instance_map = read_gray_png(png_path)?;
        let text = fs::read_to_string(json_path).map_err(io_err(json_path))?;
        let meta: MaskMetaFile = serde_json::from_str(&text).map_err(|e| IoError::Parse {
            path: json_path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let set = Self {
            instance_map,
            meta: meta.instances,
        };
        set.validate().map_err(|message| IoError::Format {
            path: png_path.to_path_buf(),
            message,
        })?;
        Ok(set)
    }

    pub fn write(&self, png_path: &Path, json_path: &Path) -> Result<(), IoError> {
        write_gray16_png(png_path, &self.instance_map)?;
        let text = serde_json::to_string_pretty(&MaskMetaFile {
            instances: self.meta.clone(),
        })
        .expect("mask metadata serializes");
        fs::write(json_path, text + "\n").map_err(io_err(json_path))
    }
}

// ---------------------------------------------------------------------------
// TUM index files and sequences

/// Parse a "timestamp value..." index file, skipping '#' comments and blank
/// lines. Returns `(timestamp, rest of line)`.
pub fn read_index_file(path: &Path) -> Result<Vec<(f64, String)>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.splitn(2, char::is_whitespace);
        let ts = parts.next().unwrap_or_default();
        let rest = parts.next().map(str::trim).unwrap_or_default();
        let t: f64 = ts.parse().map_err(|_| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: format!("bad timestamp {ts:?}"),
        })?;
        if rest.is_empty() {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "missing value after timestamp".into(),
            });
        }
        out.push((t, rest.to_string()));
    }
    Ok(out)
}

/// Index of the entry in `sorted` (by timestamp) closest to `t`, if within
/// `window`.
pub fn nearest_within(sorted: &[f64], t: f64, window: f64) -> Option<usize> {
    let i = sorted.partition_point(|&s| s < t);
    let mut best: Option<(usize, f64)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(&s) = sorted.get(j) {
            let dt = (s - t).abs();
            if dt <= window && best.map_or(true, |b| dt < b.1) {
                best = Some((j, dt));
            }
        }
    }
    best.map(|b| b.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEntry {
    pub timestamp: f64,
    pub depth_path: PathBuf,
    pub rgb_path: Option<PathBuf>,
    pub mask_paths: Option<(PathBuf, PathBuf)>,
}

/// A dataset directory in the TUM RGB-D layout.
#[derive(Debug, Clone)]
pub struct TumSequence {
    pub dir: PathBuf,
    pub intrinsics: Intrinsics,
    pub entries: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(default = "default_depth_scale")]
    depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    Intrinsics::default().depth_scale
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let f: IntrinsicsFile = toml::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })?;
    let k = Intrinsics {
        fx: f.fx,
        fy: f.fy,
        cx: f.cx,
        cy: f.cy,
        width: f.width,
        height: f.height,
        depth_scale: f.depth_scale,
    };
    k.validate().map_err(|e| IoError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), IoError> {
    create_parent(path)?;
    let text = toml::to_string(k).expect("intrinsics serialize");
    fs::write(path, text).map_err(io_err(path))
}

impl TumSequence {
    /// Index a dataset directory. Intrinsics come from `intrinsics.toml` if
    /// present, else the TUM defaults.
    pub fn open(dir: &Path) -> Result<Self, IoError> {
        if !dir.is_dir() {
            return Err(IoError::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            });
        }
        let k_path = dir.join("intrinsics.toml");
        let intrinsics = if k_path.exists() {
            read_intrinsics(&k_path)?
        } else {
            Intrinsics::default()
        };
        let mut depth = read_index_file(&dir.join("depth.txt"))?;
        depth.sort_by(|a, b| a.0.total_cmp(&b.0));
        let rgb_path = dir.join("rgb.txt");
        let mut rgb = if rgb_path.exists() {
            read_index_file(&rgb_path)?
        } else {
            Vec::new()
        };
        rgb.sort_by(|a, b| a.0.total_cmp(&b.0));
        let rgb_ts: Vec<f64> = rgb.iter().map(|r| r.0).collect();
        let entries = depth
            .into_iter()
            .map(|(t, rel)| {
                let stem = format_timestamp(t);
                let png = dir.join("masks").join(format!("{stem}.png"));
                let json = dir.join("masks").join(format!("{stem}.json"));
                SequenceEntry {
                    timestamp: t,
                    depth_path: dir.join(rel),
                    rgb_path: nearest_within(&rgb_ts, t, ASSOCIATION_WINDOW).map(|i| dir.join(&rgb[i].1)),
                    mask_paths: (png.exists() && json.exists()).then_some((png, json)),
                }
            })
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            intrinsics,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame, IoError> {
        let e = &self.entries[index];
        let depth = read_depth_png(&e.depth_path, self.intrinsics.depth_scale)?;
        if depth.width() != self.intrinsics.width || depth.height() != self.intrinsics.height {
            return Err(image_err(
                &e.depth_path,
                format!(
                    "size {}x{} does not match intrinsics {}x{}",
                    depth.width(),
                    depth.height(),
                    self.intrinsics.width,
                    self.intrinsics.height
                ),
            ));
        }
        let detections = match &e.mask_paths {
            Some((png, json)) => {
                let set = MaskSet::read(png, json)?;
                if !set.instance_map.same_size(&depth) {
                    return Err(image_err(png, "mask size differs from depth"));
                }
                Some(set.detections())
            }
            None => None,
        };
        Ok(Frame {
            index,
            timestamp: e.timestamp,
            depth,
            detections,
        })
    }

    /// Frames in timestamp order, loaded lazily.
    pub fn frames(&self) -> impl Iterator<Item = Result<Frame, IoError>> + '_ {
        (0..self.len()).map(move |i| self.load_frame(i))
    }
}

// ---------------------------------------------------------------------------
// Trajectories

/// Write "timestamp tx ty tz qx qy qz qw" lines with six decimals.
pub fn write_trajectory(path: &Path, traj: &[(f64, Pose)]) -> Result<(), IoError> {
    create_parent(path)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let werr = io_err(path);
    let mut body = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj {
        body.push_str(&trajectory_line(*t, pose));
        body.push('\n');
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(werr)
}

/// One trajectory line; the quaternion has non-negative w.
pub fn trajectory_line(t: f64, pose: &Pose) -> String {
    let mut q = pose.quaternion().into_inner();
    if q.w < 0.0 {
        q = -q;
    }
    let p = pose.translation;
    // avoid printing "-0.000000"
    let f = |v: f64| {
        let s = format!("{v:.6}");
        if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    };
    format!(
        "{} {} {} {} {} {} {} {}",
        f(t),
        f(p.x),
        f(p.y),
        f(p.z),
        f(q.i),
        f(q.j),
        f(q.k),
        f(q.w)
    )
}

pub fn read_trajectory(path: &Path) -> Result<PoseTrack, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out: PoseTrack = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let perr = |message: String| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let vals: Vec<f64> = trimmed
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| perr(format!("bad number {s:?}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 8 {
            return Err(perr(format!("expected 8 fields, found {}", vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-9) || vals.iter().any(|v| !v.is_finite()) {
            return Err(perr("invalid pose".into()));
        }
        if let Some(last) = out.last() {
            if vals[0] <= last.0 {
                return Err(perr("timestamps must increase".into()));
            }
        }
        let pose = Pose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3]));
        out.push((vals[0], pose));
    }
    Ok(out)
}
