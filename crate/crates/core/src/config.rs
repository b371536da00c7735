//! Runtime knobs shared by the CLI and the pipeline, loadable from a plain
//! `key=value` text file. Recognized keys: `sigma`, `eps_bg`, `d`, `tau`,
//! `swap_budget`, `fps`.

use crate::error::{Error, Result};
use crate::motion::{DEFAULT_BACKGROUND_WEIGHT, DEFAULT_SIGMA};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Gaussian width of the coarse-flow soft-assignment.
    pub sigma: f32,
    /// Constant background weight of the coarse flow.
    pub eps_bg: f32,
    /// Attention dimension; `None` defaults to the channel count.
    pub attention_dim: Option<usize>,
    /// Streaming-FPS swap margin.
    pub tau: f64,
    /// Streaming-FPS swap budget; `None` is unlimited.
    pub swap_budget: Option<u32>,
    /// Frame rate used for kbps conversion.
    pub fps: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            eps_bg: DEFAULT_BACKGROUND_WEIGHT,
            attention_dim: None,
            tau: 0.0,
            swap_budget: None,
            fps: 25.0,
        }
    }
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        let value = value.trim();
        match key.trim() {
            "sigma" => cfg.sigma = parse_value(value, lineno)?,
            "eps_bg" => cfg.eps_bg = parse_value(value, lineno)?,
            "d" => cfg.attention_dim = Some(parse_value(value, lineno)?),
            "tau" => cfg.tau = parse_value(value, lineno)?,
            "swap_budget" => cfg.swap_budget = Some(parse_value(value, lineno)?),
            "fps" => cfg.fps = parse_value(value, lineno)?,
            other => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("unknown config key `{other}`"),
                })
            }
        }
    }
    if cfg.sigma.is_nan() || cfg.sigma <= 0.0 {
        return Err(Error::arg("sigma must be positive"));
    }
    if cfg.eps_bg.is_nan() || cfg.eps_bg <= 0.0 {
        return Err(Error::arg("eps_bg must be positive"));
    }
    if cfg.fps.is_nan() || cfg.fps <= 0.0 {
        return Err(Error::arg("fps must be positive"));
    }
    Ok(cfg)
}

fn parse_value<T: std::str::FromStr>(value: &str, lineno: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line: lineno + 1,
        message: format!("invalid value `{value}`"),
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
