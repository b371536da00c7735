//! Rate-distortion points, CSV emission, and Pareto front extraction.

use crate::bitstream::{amortized_rate, RateLedger};
use crate::error::{Error, Result};
use std::io::Write;

/// One operating point: a labeled (rate, distortion) pair, with the frame
/// count its rate was amortized over when known.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub label: String,
    pub rate_kbps: f64,
    pub bits_per_frame: f64,
    pub metric: f64,
    pub n_frames: Option<u64>,
}

impl RdPoint {
    pub fn new(
        label: impl Into<String>,
        rate_kbps: f64,
        bits_per_frame: f64,
        metric: f64,
    ) -> Result<Self> {
        if rate_kbps.is_nan() || rate_kbps <= 0.0 {
            return Err(Error::arg(format!(
                "rate must be positive, got {rate_kbps}"
            )));
        }
        Ok(Self {
            label: label.into(),
            rate_kbps,
            bits_per_frame,
            metric,
            n_frames: None,
        })
    }

    pub fn with_frames(mut self, n_frames: u64) -> Self {
        self.n_frames = Some(n_frames);
        self
    }

    /// Build a point straight from a rate ledger: the rate is the amortized
    /// closed form over `n_frames` at `fps`.
    pub fn from_ledger(
        label: impl Into<String>,
        ledger: &RateLedger,
        n_frames: u64,
        fps: f64,
        metric: f64,
    ) -> Result<Self> {
        let (bits_per_frame, kbps) = amortized_rate(ledger, n_frames, fps)?;
        Ok(Self::new(label, kbps, bits_per_frame, metric)?.with_frames(n_frames))
    }
}

/// Whether a smaller or a larger metric value is better (L1 vs PSNR).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricDirection {
    LowerBetter,
    HigherBetter,
}

impl std::str::FromStr for MetricDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower" => Ok(MetricDirection::LowerBetter),
            "higher" => Ok(MetricDirection::HigherBetter),
            other => Err(Error::arg(format!(
                "invalid direction `{other}`, expected lower|higher"
            ))),
        }
    }
}

/// Rate-sorted points plus their Pareto-optimal subset.
#[derive(Debug, Clone)]
pub struct RdCurve {
    pub sorted: Vec<RdPoint>,
    pub pareto: Vec<RdPoint>,
}

fn better(a: f64, b: f64, dir: MetricDirection) -> bool {
    match dir {
        MetricDirection::LowerBetter => a < b,
        MetricDirection::HigherBetter => a > b,
    }
}

/// Sort by rate and extract the Pareto front (duplicates collapse to one
/// representative).
pub fn rd_curve(points: &[RdPoint], direction: MetricDirection) -> Result<RdCurve> {
    if points.is_empty() {
        return Err(Error::arg("rate-distortion curve needs at least one point"));
    }
    let mut sorted = points.to_vec();
    // Rate ascending; among equal rates the better metric first.
    sorted.sort_by(|a, b| {
        a.rate_kbps
            .partial_cmp(&b.rate_kbps)
            .expect("rates are finite")
            .then_with(|| {
                if better(a.metric, b.metric, direction) {
                    std::cmp::Ordering::Less
                } else if better(b.metric, a.metric, direction) {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Equal
                }
            })
    });
    let mut pareto: Vec<RdPoint> = Vec::new();
    for p in &sorted {
        let dominated = pareto
            .last()
            .is_some_and(|best| !better(p.metric, best.metric, direction));
        if !dominated {
            pareto.push(p.clone());
        }
    }
    Ok(RdCurve { sorted, pareto })
}

/// Emit points as CSV with columns `rate_kbps,bits_per_frame,metric,label`.
pub fn write_rd_csv(mut w: impl Write, points: &[RdPoint]) -> Result<()> {
    let io_err = |e| Error::External {
        tool: "csv".into(),
        message: format!("write failed: {e}"),
    };
    writeln!(w, "rate_kbps,bits_per_frame,metric,label").map_err(io_err)?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{}",
            p.rate_kbps, p.bits_per_frame, p.metric, p.label
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Parse the CSV format produced by [`write_rd_csv`] (header optional).
pub fn parse_rd_csv(text: &str) -> Result<Vec<RdPoint>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("rate_kbps") {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, ',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected rate_kbps,bits_per_frame,metric,label, got `{line}`"),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("invalid number `{}`", s.trim()),
            })
        };
        out.push(RdPoint::new(
            fields[3].trim(),
            num(fields[0])?,
            num(fields[1])?,
            num(fields[2])?,
        )?);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no rate-distortion points found".into(),
        });
    }
    Ok(out)
}
