//! H264 baseline via an external `ffmpeg` binary.
//!
//! The encode command follows the reference recipe exactly: preset medium,
//! libx264 with `bframes=0`, yuv420p pixel format, audio disabled, variable
//! CRF. The recipe's `-na` flag does not exist in ffmpeg; this harness emits
//! `-an` (disable audio), which is the evident intent.

use crate::error::{Error, Result};
use crate::io::FrameSet;
use std::path::{Path, PathBuf};
use std::process::Command;

/// Encode command template; `${CRF}` is substituted per operating point.
pub const H264_COMMAND_TEMPLATE: &str = "ffmpeg -i ${INPUT_FILE} -preset medium \
-codec:v libx264 -x264-params bframes=0 -pix_fmt yuv420p -an -crf ${CRF} ${OUTPUT_FILE}";

/// Wrapper around the external encoder binary.
#[derive(Debug, Clone)]
pub struct H264Encoder {
    binary: String,
}

impl Default for H264Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl H264Encoder {
    pub fn new() -> Self {
        Self {
            binary: "ffmpeg".into(),
        }
    }

    /// Use a different binary name/path (also handy for testing the missing-
    /// binary path).
    pub fn with_binary(binary: impl Into<String>) -> Self {
        Self {
            binary: binary.into(),
        }
    }

    pub fn binary(&self) -> &str {
        &self.binary
    }

    /// Whether the binary can be invoked.
    pub fn available(&self) -> bool {
        Command::new(&self.binary)
            .arg("-version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    }

    /// Argument vector of the encode invocation (without the program name).
    pub fn assemble_command(&self, input: &Path, crf: u8, output: &Path) -> Result<Vec<String>> {
        if crf > 51 {
            return Err(Error::arg(format!("CRF must be in 0..=51, got {crf}")));
        }
        Ok(vec![
            "-i".into(),
            input.display().to_string(),
            "-preset".into(),
            "medium".into(),
            "-codec:v".into(),
            "libx264".into(),
            "-x264-params".into(),
            "bframes=0".into(),
            "-pix_fmt".into(),
            "yuv420p".into(),
            "-an".into(),
            "-crf".into(),
            crf.to_string(),
            output.display().to_string(),
        ])
    }

    /// Run the encode; on any failure no partial output is left behind.
    pub fn encode(&self, input: &Path, crf: u8, output: &Path) -> Result<()> {
        let args = self.assemble_command(input, crf, output)?;
        let result = Command::new(&self.binary).args(&args).output();
        let cleanup = || {
            let _ = std::fs::remove_file(output);
        };
        match result {
            Err(e) => {
                cleanup();
                Err(Error::External {
                    tool: self.binary.clone(),
                    message: format!("failed to launch: {e}"),
                })
            }
            Ok(out) if !out.status.success() => {
                cleanup();
                Err(Error::External {
                    tool: self.binary.clone(),
                    message: format!(
                        "exit {}: {}",
                        out.status,
                        String::from_utf8_lossy(&out.stderr)
                    ),
                })
            }
            Ok(_) => Ok(()),
        }
    }

    /// Decode a video to raw RGB frames of known extents.
    pub fn decode_to_frames(&self, video: &Path, width: usize, height: usize) -> Result<FrameSet> {
        let out = Command::new(&self.binary)
            .args([
                "-i",
                &video.display().to_string(),
                "-f",
                "rawvideo",
                "-pix_fmt",
                "rgb24",
                "-",
            ])
            .output()
            .map_err(|e| Error::External {
                tool: self.binary.clone(),
                message: format!("failed to launch: {e}"),
            })?;
        if !out.status.success() {
            return Err(Error::External {
                tool: self.binary.clone(),
                message: format!(
                    "decode exit {}: {}",
                    out.status,
                    String::from_utf8_lossy(&out.stderr)
                ),
            });
        }
        let frame_len = 3 * width * height;
        if frame_len == 0 || out.stdout.len() % frame_len != 0 {
            return Err(Error::External {
                tool: self.binary.clone(),
                message: format!(
                    "decoded {} bytes, not a multiple of {frame_len}",
                    out.stdout.len()
                ),
            });
        }
        let mut set = FrameSet::empty(width, height)?;
        for chunk in out.stdout.chunks_exact(frame_len) {
            set.push_interleaved(chunk)?;
        }
        Ok(set)
    }

    /// Encode a raw frame set into an input video the encoder accepts.
    pub fn frames_to_video(&self, frames: &FrameSet, fps: f64, output: &Path) -> Result<()> {
        let mut raw =
            Vec::with_capacity(frames.frame_count() * 3 * frames.width() * frames.height());
        for i in 0..frames.frame_count() {
            raw.extend(frames.frame_interleaved(i));
        }
        let raw_path = output.with_extension("rgb24");
        std::fs::write(&raw_path, &raw).map_err(|e| Error::io(&raw_path, e))?;
        if output.exists() {
            std::fs::remove_file(output).map_err(|e| Error::io(output, e))?;
        }
        let out = Command::new(&self.binary)
            .args([
                "-f",
                "rawvideo",
                "-pix_fmt",
                "rgb24",
                "-video_size",
                &format!("{}x{}", frames.width(), frames.height()),
                "-framerate",
                &format!("{fps}"),
                "-i",
                &raw_path.display().to_string(),
                "-codec:v",
                "libx264rgb",
                "-qp",
                "0",
                &output.display().to_string(),
            ])
            .output()
            .map_err(|e| Error::External {
                tool: self.binary.clone(),
                message: format!("failed to launch: {e}"),
            })?;
        let _ = std::fs::remove_file(&raw_path);
        if !out.status.success() {
            let _ = std::fs::remove_file(output);
            return Err(Error::External {
                tool: self.binary.clone(),
                message: format!(
                    "raw mux exit {}: {}",
                    out.status,
                    String::from_utf8_lossy(&out.stderr)
                ),
            });
        }
        Ok(())
    }
}

/// One measured H264 operating point.
#[derive(Debug)]
pub struct H264Point {
    pub crf: u8,
    pub encoded_bytes: u64,
    pub kbps: f64,
    pub bits_per_frame: f64,
    pub frames: FrameSet,
    pub video_path: PathBuf,
}

/// Encode at one CRF, measure the file rate against the decoded duration,
/// and return the decoded frames for distortion measurement.
pub fn h264_baseline(
    encoder: &H264Encoder,
    input: &Path,
    crf: u8,
    width: usize,
    height: usize,
    fps: f64,
    workdir: &Path,
) -> Result<H264Point> {
    if fps.is_nan() || fps <= 0.0 {
        return Err(Error::arg("fps must be positive"));
    }
    let output = workdir.join(format!("h264_crf{crf}.mp4"));
    if output.exists() {
        std::fs::remove_file(&output).map_err(|e| Error::io(&output, e))?;
    }
    encoder.encode(input, crf, &output)?;
    let encoded_bytes = std::fs::metadata(&output)
        .map_err(|e| Error::io(&output, e))?
        .len();
    let frames = encoder.decode_to_frames(&output, width, height)?;
    if frames.is_empty() {
        return Err(Error::External {
            tool: encoder.binary().to_string(),
            message: "no frames decoded from encoded output".into(),
        });
    }
    let n = frames.frame_count() as f64;
    let bits = encoded_bytes as f64 * 8.0;
    let kbps = bits / (n / fps) / 1000.0;
    Ok(H264Point {
        crf,
        encoded_bytes,
        kbps,
        bits_per_frame: bits / n,
        frames,
        video_path: output,
    })
}

/// Sweep a list of CRF values.
pub fn crf_sweep(
    encoder: &H264Encoder,
    input: &Path,
    crfs: &[u8],
    width: usize,
    height: usize,
    fps: f64,
    workdir: &Path,
) -> Result<Vec<H264Point>> {
    crfs.iter()
        .map(|&crf| h264_baseline(encoder, input, crf, width, height, fps, workdir))
        .collect()
}
