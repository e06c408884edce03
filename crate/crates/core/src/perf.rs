//! Throughput measurement for the float and integer inference paths.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::net::{self, Branch, Model};
use crate::quant::IntModel;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub min_runs: usize,
    /// Minimum timed wall time.
    pub seconds: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 3, min_runs: 100, seconds: 2.0 }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.seconds > 0.0 && self.seconds.is_finite()) {
            return Err(Error::InvalidDuration(self.seconds));
        }
        if self.min_runs < 2 {
            return Err(Error::InvalidConfig("bench needs at least two runs".into()));
        }
        Ok(())
    }
}

/// Frames per second over individual runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub runs: usize,
    pub fps_mean: f64,
    pub fps_std: f64,
    pub seconds_mean: f64,
}

/// Calls `f` `warmup` times, then until both `min_runs` calls and
/// `seconds` of wall time have accumulated. `frames` is the number of
/// frames one call processes.
pub fn time_runs(cfg: &BenchConfig, frames: usize, mut f: impl FnMut() -> Result<()>) -> Result<RunStats> {
    cfg.validate()?;
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut times = Vec::new();
    let start = Instant::now();
    while times.len() < cfg.min_runs || start.elapsed().as_secs_f64() < cfg.seconds {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64().max(1e-12));
    }
    let fps: Vec<f64> = times.iter().map(|t| frames as f64 / t).collect();
    let n = fps.len() as f64;
    let mean = fps.iter().sum::<f64>() / n;
    let var = fps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(RunStats { runs: times.len(), fps_mean: mean, fps_std: var.sqrt(), seconds_mean: times.iter().sum::<f64>() / n })
}

/// Mean time per frame of every layer (or integer op) and the share of the
/// measured end-to-end time they account for.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBreakdown {
    pub layers: Vec<(String, Duration)>,
    pub total: Duration,
}

impl LayerBreakdown {
    pub fn coverage(&self) -> f64 {
        let sum: Duration = self.layers.iter().map(|(_, d)| *d).sum();
        sum.as_secs_f64() / self.total.as_secs_f64().max(1e-12)
    }
}

fn breakdown(
    names: Vec<String>,
    runs: usize,
    mut f: impl FnMut(&mut [Duration]) -> Result<()>,
) -> Result<LayerBreakdown> {
    let mut t = vec![Duration::ZERO; names.len()];
    let start = Instant::now();
    for _ in 0..runs.max(1) {
        f(&mut t)?;
    }
    let total = start.elapsed() / runs.max(1) as u32;
    let layers = names.into_iter().zip(t).map(|(n, d)| (n, d / runs.max(1) as u32)).collect();
    Ok(LayerBreakdown { layers, total })
}

fn layer_names(model: &Model) -> Vec<String> {
    let name = |b: &str, i: usize, k: net::LayerKind| format!("{b}/{i:02} {k:?}");
    let d = model.despeckle.iter().enumerate().map(|(i, l)| name("despeckle", i, l.kind));
    let b = model.deblur.iter().enumerate().map(|(i, l)| name("deblur", i, l.kind));
    d.chain(b).collect()
}

pub fn f32_breakdown(model: &Model, img: &Image, branch: Branch, runs: usize) -> Result<LayerBreakdown> {
    breakdown(layer_names(model), runs, |t| net::forward_timed(model, img, branch, t).map(|_| ()))
}

pub fn int8_breakdown(model: &IntModel, img: &Image, branch: Branch, runs: usize) -> Result<LayerBreakdown> {
    let name = |b: &str, i: usize, op: &crate::quant::IntOp| format!("{b}/{i:02} {}", op.name());
    let names = model
        .despeckle
        .iter()
        .enumerate()
        .map(|(i, o)| name("despeckle", i, o))
        .chain(model.deblur.iter().enumerate().map(|(i, o)| name("deblur", i, o)))
        .collect();
    breakdown(names, runs, |t| model.forward_timed(img, branch, Some(t)).map(|_| ()))
}
