//! On-disk formats: raw 8-bit RGB frame sets with a sidecar text descriptor,
//! keypoint and landmark text records, and the swap-decision log.
//!
//! A frame set named `clip` lives in `clip.rgb` (planar R, G, B per frame,
//! frames concatenated) plus `clip.desc` declaring `width`, `height`, and
//! `frames`. Frames are stored at 8 bits per sample; the pipeline converts
//! to `[0, 1]` floats on load and quantizes on store, and metrics run on the
//! 8-bit data directly.

use crate::error::{Error, Result};
use crate::motion::KeypointSet;
use crate::selection::{LandmarkTrack, SwapDecision};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// An 8-bit RGB frame sequence (planar storage).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSet {
    width: usize,
    height: usize,
    frames: Vec<Vec<u8>>,
}

impl FrameSet {
    pub fn empty(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg("frame extents must be positive"));
        }
        Ok(Self {
            width,
            height,
            frames: Vec::new(),
        })
    }

    pub fn new(width: usize, height: usize, frames: Vec<Vec<u8>>) -> Result<Self> {
        let mut set = Self::empty(width, height)?;
        for (i, f) in frames.iter().enumerate() {
            if f.len() != 3 * width * height {
                return Err(Error::arg(format!(
                    "frame {i} has {} bytes, expected {}",
                    f.len(),
                    3 * width * height
                )));
            }
        }
        set.frames = frames;
        Ok(set)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_bytes(&self, i: usize) -> &[u8] {
        &self.frames[i]
    }

    /// Append a `[0, 1]` float image (3 x H x W), quantizing to 8 bits.
    pub fn push_tensor(&mut self, image: &Tensor) -> Result<()> {
        if image.shape() != [3, self.height, self.width] {
            return Err(Error::shape(format!(
                "image shape {:?}, expected [3, {}, {}]",
                image.shape(),
                self.height,
                self.width
            )));
        }
        let bytes = image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        self.frames.push(bytes);
        Ok(())
    }

    /// Frame `i` as a `[0, 1]` float tensor of shape 3 x H x W.
    pub fn frame_tensor(&self, i: usize) -> Tensor {
        let data = self.frames[i].iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("u8 data is finite")
    }

    /// Convert an interleaved RGB24 buffer (as produced by raw video
    /// decoders) into a planar frame and append it.
    pub fn push_interleaved(&mut self, rgb: &[u8]) -> Result<()> {
        let plane = self.width * self.height;
        if rgb.len() != 3 * plane {
            return Err(Error::arg(format!(
                "interleaved frame has {} bytes, expected {}",
                rgb.len(),
                3 * plane
            )));
        }
        let mut planar = vec![0u8; 3 * plane];
        for p in 0..plane {
            planar[p] = rgb[3 * p];
            planar[plane + p] = rgb[3 * p + 1];
            planar[2 * plane + p] = rgb[3 * p + 2];
        }
        self.frames.push(planar);
        Ok(())
    }

    /// Frame `i` as interleaved RGB24 bytes.
    pub fn frame_interleaved(&self, i: usize) -> Vec<u8> {
        let plane = self.width * self.height;
        let f = &self.frames[i];
        let mut out = vec![0u8; 3 * plane];
        for p in 0..plane {
            out[3 * p] = f[p];
            out[3 * p + 1] = f[plane + p];
            out[3 * p + 2] = f[2 * plane + p];
        }
        out
    }

    fn rgb_path(stem: &Path) -> PathBuf {
        let mut p = stem.as_os_str().to_owned();
        p.push(".rgb");
        PathBuf::from(p)
    }

    fn desc_path(stem: &Path) -> PathBuf {
        let mut p = stem.as_os_str().to_owned();
        p.push(".desc");
        PathBuf::from(p)
    }

    /// Write `<stem>.rgb` and `<stem>.desc`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mut raw = Vec::with_capacity(self.frames.len() * 3 * self.width * self.height);
        for f in &self.frames {
            raw.extend_from_slice(f);
        }
        let rgb = Self::rgb_path(stem);
        std::fs::write(&rgb, raw).map_err(|e| Error::io(&rgb, e))?;
        let desc = format!(
            "width={}\nheight={}\nframes={}\n",
            self.width,
            self.height,
            self.frames.len()
        );
        let desc_path = Self::desc_path(stem);
        std::fs::write(&desc_path, desc).map_err(|e| Error::io(&desc_path, e))?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let desc_path = Self::desc_path(stem);
        let desc = std::fs::read_to_string(&desc_path).map_err(|e| Error::io(&desc_path, e))?;
        let mut width = None;
        let mut height = None;
        let mut frames = None;
        for (lineno, line) in desc.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let value: usize = value.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("invalid number `{}`", value.trim()),
            })?;
            match key.trim() {
                "width" => width = Some(value),
                "height" => height = Some(value),
                "frames" => frames = Some(value),
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("unknown descriptor key `{other}`"),
                    })
                }
            }
        }
        let (width, height, n) = match (width, height, frames) {
            (Some(w), Some(h), Some(n)) => (w, h, n),
            _ => {
                return Err(Error::Parse {
                    line: 0,
                    message: "descriptor must declare width, height, and frames".into(),
                })
            }
        };
        let rgb_path = Self::rgb_path(stem);
        let raw = std::fs::read(&rgb_path).map_err(|e| Error::io(&rgb_path, e))?;
        let frame_len = 3 * width * height;
        if raw.len() != n * frame_len {
            return Err(Error::arg(format!(
                "{} holds {} bytes, descriptor implies {}",
                rgb_path.display(),
                raw.len(),
                n * frame_len
            )));
        }
        let frames = raw.chunks_exact(frame_len).map(|c| c.to_vec()).collect();
        Self::new(width, height, frames)
    }
}

fn parse_floats(fields: &[&str], lineno: usize) -> Result<Vec<f32>> {
    fields
        .iter()
        .map(|f| {
            f.trim().parse::<f32>().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid number `{}`", f.trim()),
            })
        })
        .collect()
}

/// Parse keypoint records: one line per frame,
/// `frame_index, x0, y0, ..., x9, y9`, normalized coordinates. Coordinates
/// are clamped into `[-1, 1]` (detection ingest is lenient; the bitstream
/// decoder is strict).
pub fn parse_keypoint_records(text: &str) -> Result<Vec<(u32, KeypointSet)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 || fields.len().is_multiple_of(2) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!(
                    "expected `frame_index, x0, y0, ...` with full pairs, got {} fields",
                    fields.len()
                ),
            });
        }
        let frame_index: u32 = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("invalid frame index `{}`", fields[0].trim()),
        })?;
        let coords = parse_floats(&fields[1..], lineno + 1)?;
        let points = coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let kp = KeypointSet::from_detections(points).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push((frame_index, kp));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no keypoint records found".into(),
        });
    }
    Ok(out)
}

pub fn read_keypoint_records(path: impl AsRef<Path>) -> Result<Vec<(u32, KeypointSet)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoint_records(&text)
}

pub fn write_keypoint_records(
    path: impl AsRef<Path>,
    records: &[(u32, KeypointSet)],
) -> Result<()> {
    let mut text = String::new();
    for (frame, kp) in records {
        write!(text, "{frame}").expect("string write");
        for p in kp.points() {
            write!(text, ", {}, {}", p[0], p[1]).expect("string write");
        }
        text.push('\n');
    }
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fixture form of keypoint ingest: a weight-container entry of shape
/// `[M, 2N]` holds M frames of N (x, y) pairs; frame indices run 0..M-1.
/// Coordinates are clamped like the text ingest.
pub fn keypoints_from_weights(
    weights: &crate::weights::WeightMap,
    name: &str,
) -> Result<Vec<(u32, KeypointSet)>> {
    let tensor = weights.require(name)?;
    if tensor.rank() != 2 || tensor.shape()[1] % 2 != 0 || tensor.shape()[1] == 0 {
        return Err(Error::shape(format!(
            "keypoint fixture `{name}` must be M x 2N, got {:?}",
            tensor.shape()
        )));
    }
    let pairs = tensor.shape()[1] / 2;
    let mut out = Vec::with_capacity(tensor.shape()[0]);
    for (frame, row) in tensor.data().chunks_exact(2 * pairs).enumerate() {
        let points = row.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        out.push((frame as u32, KeypointSet::from_detections(points)?));
    }
    Ok(out)
}

/// Store keypoint records as a weight-container fixture entry.
pub fn keypoints_into_weights(
    weights: &mut crate::weights::WeightMap,
    name: &str,
    records: &[(u32, KeypointSet)],
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::arg("no keypoint records to store"));
    }
    let pairs = records[0].1.len();
    let mut data = Vec::with_capacity(records.len() * 2 * pairs);
    for (_, kp) in records {
        if kp.len() != pairs {
            return Err(Error::shape("keypoint counts differ across frames"));
        }
        for p in kp.points() {
            data.push(p[0]);
            data.push(p[1]);
        }
    }
    weights.insert(
        name,
        crate::tensor::Tensor::new(vec![records.len(), 2 * pairs], data)?,
    );
    Ok(())
}

/// Parse a landmark track: a header line `L=<count>` declaring the landmark
/// count, then one record per frame `frame_index, x0, y0, ..., x(L-1), y(L-1)`.
pub fn parse_landmark_track(text: &str) -> Result<LandmarkTrack> {
    let mut landmark_count: Option<usize> = None;
    let mut frame_ids = Vec::new();
    let mut features = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if landmark_count.is_none() {
            let decl = line.strip_prefix("L=").ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: "landmark file must start with a `L=<count>` header".into(),
            })?;
            let l: usize = decl.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("invalid landmark count `{}`", decl.trim()),
            })?;
            if l == 0 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "landmark count must be positive".into(),
                });
            }
            landmark_count = Some(l);
            continue;
        }
        let l = landmark_count.expect("header parsed");
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + 2 * l {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!(
                    "expected frame index plus {} coordinates, got {} fields",
                    2 * l,
                    fields.len()
                ),
            });
        }
        let frame_index: u32 = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("invalid frame index `{}`", fields[0].trim()),
        })?;
        frame_ids.push(frame_index);
        features.push(parse_floats(&fields[1..], lineno + 1)?);
    }
    LandmarkTrack::new(frame_ids, features)
}

pub fn read_landmark_track(path: impl AsRef<Path>) -> Result<LandmarkTrack> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmark_track(&text)
}

pub fn write_landmark_track(path: impl AsRef<Path>, track: &LandmarkTrack) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "L={}", track.dim() / 2).expect("string write");
    for i in 0..track.len() {
        write!(text, "{}", track.frame_ids()[i]).expect("string write");
        for v in track.feature(i) {
            write!(text, ", {v}").expect("string write");
        }
        text.push('\n');
    }
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One swap-log record: `fill,<frame>` during reservoir fill,
/// `swap,<admitted>,<evicted>` afterwards. Rejections log nothing.
pub fn format_swap_record(decision: &SwapDecision) -> Option<String> {
    match (decision.admitted, decision.evicted) {
        (Some(a), Some(e)) => Some(format!("swap,{a},{e}")),
        (Some(a), None) => Some(format!("fill,{a}")),
        _ => None,
    }
}

/// Parse a swap log back into (admitted, evicted) pairs.
pub fn parse_swap_log(text: &str) -> Result<Vec<(u32, Option<u32>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_u32 = |s: &str| -> Result<u32> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("invalid frame index `{}`", s.trim()),
            })
        };
        match fields.as_slice() {
            ["fill", a] => out.push((parse_u32(a)?, None)),
            ["swap", a, e] => out.push((parse_u32(a)?, Some(parse_u32(e)?))),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("unrecognized swap record `{line}`"),
                })
            }
        }
    }
    Ok(out)
}
