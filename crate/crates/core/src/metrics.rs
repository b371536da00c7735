//! Reconstruction quality metrics over 8-bit frame sequences.
//!
//! All metrics use the 8-bit convention (peak 255) and run on the stored
//! u8 samples, so integer differences are exact. SSIM uses an 11x11 Gaussian
//! window (sigma 1.5) over valid positions with the usual stabilizers; the
//! multi-scale variant uses five dyadic scales, so frames must be at least
//! 176 pixels on each side (11 * 2^4) for it to be defined.
//!
//! Channel handling defaults to RGB averaged over channels and can be
//! switched to BT.601 luma only.

use crate::error::{Error, Result};
use crate::io::FrameSet;
use rayon::prelude::*;
use serde::Serialize;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Per-scale weights of multi-scale SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Minimum frame side for the 5-scale MS-SSIM to have a valid window at the
/// coarsest scale.
pub const MS_SSIM_MIN_SIDE: usize = SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// Compute per RGB channel and average the three results.
    Rgb,
    /// Compute on BT.601 luma only.
    Luma,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricOptions {
    pub channel_mode: ChannelMode,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            channel_mode: ChannelMode::Rgb,
        }
    }
}

/// Per-frame metric values plus their sequence mean.
#[derive(Debug, Clone, Serialize)]
pub struct SequenceMetric {
    pub mean: f64,
    pub per_frame: Vec<f64>,
}

impl SequenceMetric {
    fn from_values(per_frame: Vec<f64>) -> Self {
        let mean = per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64;
        Self { mean, per_frame }
    }
}

/// The full evaluation report. `ms_ssim` is `None` when frames are smaller
/// than [`MS_SSIM_MIN_SIDE`].
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub l1: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    pub per_frame: PerFrameReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerFrameReport {
    pub l1: Vec<f64>,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub ms_ssim: Vec<f64>,
}

fn check_compatible(a: &FrameSet, b: &FrameSet) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(format!(
            "frame extents differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.frame_count() != b.frame_count() {
        return Err(Error::shape(format!(
            "frame counts differ: {} vs {}",
            a.frame_count(),
            b.frame_count()
        )));
    }
    if a.frame_count() == 0 {
        return Err(Error::arg("cannot evaluate empty sequences"));
    }
    Ok(())
}

/// Extract the comparison planes of one frame as f64 in `[0, 255]`.
fn planes(set: &FrameSet, i: usize, mode: ChannelMode) -> Vec<Vec<f64>> {
    let plane = set.width() * set.height();
    let f = set.frame_bytes(i);
    match mode {
        ChannelMode::Rgb => (0..3)
            .map(|c| {
                f[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&b| b as f64)
                    .collect()
            })
            .collect(),
        ChannelMode::Luma => {
            let mut y = Vec::with_capacity(plane);
            for p in 0..plane {
                y.push(
                    0.299 * f[p] as f64
                        + 0.587 * f[plane + p] as f64
                        + 0.114 * f[2 * plane + p] as f64,
                );
            }
            vec![y]
        }
    }
}

fn frame_l1(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.iter().zip(b) {
        for (&x, &y) in pa.iter().zip(pb) {
            sum += (x - y).abs();
        }
        count += pa.len();
    }
    sum / count as f64
}

fn frame_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.iter().zip(b) {
        for (&x, &y) in pa.iter().zip(pb) {
            let d = x - y;
            sum += d * d;
        }
        count += pa.len();
    }
    sum / count as f64
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps of the SSIM window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Valid-region separable Gaussian filter: output is (h-10) x (w-10).
fn gaussian_filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    // Horizontal pass over full rows.
    let mut horiz = vec![0.0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * img[y * w + x + k];
            }
            horiz[y * wo + x] = acc;
        }
    }
    // Vertical pass.
    let ho = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * horiz[(y + k) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

struct SsimFields {
    luminance: Vec<f64>,
    contrast_structure: Vec<f64>,
}

/// Per-position luminance and contrast-structure terms of SSIM.
fn ssim_fields(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<SsimFields> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps();
    let aa: Vec<f64> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let mu_a = gaussian_filter_valid(a, w, h, &taps);
    let mu_b = gaussian_filter_valid(b, w, h, &taps);
    let m_aa = gaussian_filter_valid(&aa, w, h, &taps);
    let m_bb = gaussian_filter_valid(&bb, w, h, &taps);
    let m_ab = gaussian_filter_valid(&ab, w, h, &taps);
    let n = mu_a.len();
    let mut luminance = Vec::with_capacity(n);
    let mut contrast_structure = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        luminance.push((2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1));
        contrast_structure.push((2.0 * cov + C2) / (va + vb + C2));
    }
    Ok(SsimFields {
        luminance,
        contrast_structure,
    })
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    let fields = ssim_fields(a, b, w, h)?;
    let n = fields.luminance.len() as f64;
    let sum: f64 = fields
        .luminance
        .iter()
        .zip(&fields.contrast_structure)
        .map(|(&l, &cs)| l * cs)
        .sum();
    Ok(sum / n)
}

/// 2x2 mean downsampling on an f64 plane (odd trailing row/column dropped).
fn downsample2(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (wo, ho) = (w / 2, h / 2);
    let mut out = vec![0.0f64; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            let base = 2 * y * w + 2 * x;
            out[y * wo + x] = (img[base] + img[base + 1] + img[base + w] + img[base + w + 1]) / 4.0;
        }
    }
    (out, wo, ho)
}

fn ms_ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    let scales = MS_SSIM_WEIGHTS.len();
    let mut ca = a.to_vec();
    let mut cb = b.to_vec();
    let (mut cw, mut ch) = (w, h);
    let mut result = 1.0f64;
    for (s, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        if cw < SSIM_WINDOW || ch < SSIM_WINDOW {
            return Err(Error::arg(format!(
                "frames must be at least {MS_SSIM_MIN_SIDE} pixels per side for 5-scale MS-SSIM"
            )));
        }
        let fields = ssim_fields(&ca, &cb, cw, ch)?;
        let n = fields.contrast_structure.len() as f64;
        let mean_cs = fields.contrast_structure.iter().sum::<f64>() / n;
        if s + 1 == scales {
            let mean_l_cs = fields
                .luminance
                .iter()
                .zip(&fields.contrast_structure)
                .map(|(&l, &cs)| l * cs)
                .sum::<f64>()
                / n;
            result *= mean_l_cs.max(0.0).powf(weight);
        } else {
            // Negative means are clamped so fractional powers stay real.
            result *= mean_cs.max(0.0).powf(weight);
            let (da, dw, dh) = downsample2(&ca, cw, ch);
            let (db, _, _) = downsample2(&cb, cw, ch);
            ca = da;
            cb = db;
            cw = dw;
            ch = dh;
        }
    }
    Ok(result)
}

fn mean_over_planes(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    w: usize,
    h: usize,
    f: impl Fn(&[f64], &[f64], usize, usize) -> Result<f64>,
) -> Result<f64> {
    let mut sum = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        sum += f(pa, pb, w, h)?;
    }
    Ok(sum / a.len() as f64)
}

/// Mean absolute error in 8-bit units.
pub fn metric_l1(a: &FrameSet, b: &FrameSet, opts: &MetricOptions) -> Result<SequenceMetric> {
    check_compatible(a, b)?;
    let values = (0..a.frame_count())
        .into_par_iter()
        .map(|i| {
            frame_l1(
                &planes(a, i, opts.channel_mode),
                &planes(b, i, opts.channel_mode),
            )
        })
        .collect();
    Ok(SequenceMetric::from_values(values))
}

/// Peak signal-to-noise ratio in dB; +inf for identical frames.
pub fn metric_psnr(a: &FrameSet, b: &FrameSet, opts: &MetricOptions) -> Result<SequenceMetric> {
    check_compatible(a, b)?;
    let values = (0..a.frame_count())
        .into_par_iter()
        .map(|i| {
            psnr_from_mse(frame_mse(
                &planes(a, i, opts.channel_mode),
                &planes(b, i, opts.channel_mode),
            ))
        })
        .collect();
    Ok(SequenceMetric::from_values(values))
}

/// Structural similarity with the standard 11x11 / sigma 1.5 window.
pub fn metric_ssim(a: &FrameSet, b: &FrameSet, opts: &MetricOptions) -> Result<SequenceMetric> {
    check_compatible(a, b)?;
    let (w, h) = (a.width(), a.height());
    let values = (0..a.frame_count())
        .into_par_iter()
        .map(|i| {
            mean_over_planes(
                &planes(a, i, opts.channel_mode),
                &planes(b, i, opts.channel_mode),
                w,
                h,
                ssim_plane,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceMetric::from_values(values))
}

/// 5-scale multi-scale SSIM; frames must be at least
/// [`MS_SSIM_MIN_SIDE`] pixels per side.
pub fn metric_msssim(a: &FrameSet, b: &FrameSet, opts: &MetricOptions) -> Result<SequenceMetric> {
    check_compatible(a, b)?;
    let (w, h) = (a.width(), a.height());
    let values = (0..a.frame_count())
        .into_par_iter()
        .map(|i| {
            mean_over_planes(
                &planes(a, i, opts.channel_mode),
                &planes(b, i, opts.channel_mode),
                w,
                h,
                ms_ssim_plane,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceMetric::from_values(values))
}

/// Full report over two sequences. MS-SSIM is omitted (not an error) when
/// frames are too small for five scales.
pub fn evaluate(a: &FrameSet, b: &FrameSet, opts: &MetricOptions) -> Result<MetricReport> {
    check_compatible(a, b)?;
    let l1 = metric_l1(a, b, opts)?;
    let psnr = metric_psnr(a, b, opts)?;
    let ssim = metric_ssim(a, b, opts)?;
    let msssim = if a.width() >= MS_SSIM_MIN_SIDE && a.height() >= MS_SSIM_MIN_SIDE {
        Some(metric_msssim(a, b, opts)?)
    } else {
        None
    };
    let (ms_mean, ms_frames) = match msssim {
        Some(m) => (Some(m.mean), m.per_frame),
        None => (None, Vec::new()),
    };
    Ok(MetricReport {
        l1: l1.mean,
        psnr_db: psnr.mean,
        ssim: ssim.mean,
        ms_ssim: ms_mean,
        per_frame: PerFrameReport {
            l1: l1.per_frame,
            psnr_db: psnr.per_frame,
            ssim: ssim.per_frame,
            ms_ssim: ms_frames,
        },
    })
}
