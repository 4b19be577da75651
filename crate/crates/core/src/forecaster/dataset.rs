//! Training windows cut from simulated crowds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SampleWindow;
use crate::error::{Error, Result};
use crate::grid::{DensityMap, Frame};
use crate::flow::{baseline_flow_density, FlowParams};
use crate::simulator::{self, Scene};
use crate::synth::{render_frame, sample_heads, smooth_texture, synth_density, KernelConfig, RenderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Observed maps per window (N).
    pub frames: usize,
    /// Sampling interval between maps (s); a multiple of the simulator step.
    pub interval: f64,
    /// Simulated time (s).
    pub duration: f64,
    /// Samples before this time are dropped so the scene can fill up.
    pub warmup: f64,
    /// Offset, in samples, between consecutive windows.
    pub stride: usize,
    pub kernel: KernelConfig,
    pub render: RenderConfig,
    pub flow: FlowParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            interval: 0.5,
            duration: 30.0,
            warmup: 10.0,
            stride: 1,
            kernel: KernelConfig::default(),
            render: RenderConfig::default(),
            flow: FlowParams::default(),
        }
    }
}

/// Rendered frames and density maps sampled every `interval` after warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    /// Sample times (s).
    pub times: Vec<f64>,
    pub frames: Vec<Frame>,
    pub densities: Vec<DensityMap>,
}

/// Simulates `scene` with `seed`, renders a frame and synthesises a density
/// map every `interval`, dropping samples before the warmup.
pub fn simulated_series(scene: &Scene, seed: u64, cfg: &DatasetConfig) -> Result<Series> {
    cfg.kernel.validate()?;
    let log = simulator::run(scene, seed, cfg.duration)?;
    let (h, w) = (scene.image.height, scene.image.width);
    let samples: Vec<_> = sample_heads(&log, scene, cfg.interval)?
        .into_iter()
        .filter(|(t, _)| *t >= cfg.warmup - 1e-9)
        .collect();
    let background = smooth_texture(h, w, cfg.render.background_smoothness, cfg.render.background_seed, 0.35, 0.95);
    let frames = samples.iter().map(|(_, heads)| render_frame(heads, &background, &cfg.render)).collect();
    let densities = samples
        .iter()
        .map(|(_, heads)| synth_density(heads, h, w, &cfg.kernel))
        .collect::<Result<Vec<_>>>()?;
    Ok(Series {
        times: samples.iter().map(|(t, _)| *t).collect(),
        frames,
        densities,
    })
}

/// Start indices of the windows cut from a series of `len` samples: each
/// window needs `frames` observed maps plus a target.
pub fn window_starts(len: usize, cfg: &DatasetConfig) -> Vec<usize> {
    (0..len.saturating_sub(cfg.frames)).step_by(cfg.stride.max(1)).collect()
}

/// Overlapping windows of `frames + 1` maps from a simulated series. The
/// flow-warped density is estimated from the last two observed frames.
pub fn simulated_windows(scene: &Scene, seed: u64, cfg: &DatasetConfig) -> Result<Vec<SampleWindow>> {
    if cfg.frames < 2 || cfg.stride == 0 {
        return Err(Error::Config(format!("dataset needs frames >= 2 and stride >= 1, got {} and {}", cfg.frames, cfg.stride)));
    }
    cfg.flow.validate()?;
    let series = simulated_series(scene, seed, cfg)?;
    let (frames, densities) = (&series.frames, &series.densities);
    let n = cfg.frames;
    let mut warped = BTreeMap::new();
    let mut windows = Vec::new();
    for i in window_starts(frames.len(), cfg) {
        let last = i + n - 1;
        if !warped.contains_key(&last) {
            let d = baseline_flow_density(&frames[last - 1], &frames[last], &densities[last], &cfg.flow)?;
            warped.insert(last, d);
        }
        windows.push(SampleWindow {
            frames: frames[i..i + n].to_vec(),
            densities: densities[i..i + n].to_vec(),
            target: Some(densities[i + n].clone()),
            flow_warped: Some(warped[&last].clone()),
        });
    }
    Ok(windows)
}
