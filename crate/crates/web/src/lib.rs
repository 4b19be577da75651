//! Browser demo: simulate the corridor scene, look at its frames and density
//! maps, forecast the next map with the flow baseline, and synthesise a
//! density map from clicked head positions.

use crowdcast::flow::{baseline_flow_density, FlowParams};
use crowdcast::forecaster::{simulated_series, DatasetConfig, Series};
use crowdcast::metrics::evaluate_maps;
use crowdcast::simulator::corridor_scene;
use crowdcast::synth::{synth_density, KernelConfig};
use crowdcast::{DensityMap, Grid2D};
use wasm_bindgen::prelude::*;

fn js_err(e: crowdcast::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A simulated corridor sequence held in memory.
#[wasm_bindgen]
pub struct Corridor {
    size: usize,
    series: Series,
}

#[wasm_bindgen]
impl Corridor {
    /// Simulates `seconds` of the corridor at `size`×`size` pixels, sampled
    /// every half second after a 15 s warmup.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, seconds: f64) -> Result<Corridor, JsError> {
        let cfg = DatasetConfig {
            warmup: 15.0,
            duration: 15.0 + seconds,
            ..DatasetConfig::default()
        };
        let series = simulated_series(&corridor_scene(size), seed, &cfg).map_err(js_err)?;
        Ok(Corridor { size, series })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.series.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.times.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.series.times[i]
    }

    /// Grayscale frame `i`, row-major, values in [0, 1].
    pub fn frame(&self, i: usize) -> Vec<f64> {
        self.series.frames[i].grid().values().to_vec()
    }

    pub fn density(&self, i: usize) -> Vec<f64> {
        self.series.densities[i].grid().values().to_vec()
    }

    pub fn count(&self, i: usize) -> f64 {
        self.series.densities[i].count()
    }

    /// Flow baseline forecast of map `i + 1`: map `i` warped along the flow
    /// from frame `i - 1` to frame `i`.
    pub fn forecast(&self, i: usize) -> Result<Vec<f64>, JsError> {
        if i == 0 || i >= self.len() {
            return Err(JsError::new("forecast needs 1 <= i < len"));
        }
        let s = &self.series;
        let d = baseline_flow_density(&s.frames[i - 1], &s.frames[i], &s.densities[i], &FlowParams::default()).map_err(js_err)?;
        Ok(d.grid().values().to_vec())
    }

    /// Patch-wise absolute error of `pred` against map `i` with `k` patches.
    pub fn pmae(&self, pred: Vec<f64>, i: usize, k: usize) -> Result<f64, JsError> {
        let pred = Grid2D::new(self.size, self.size, pred).and_then(DensityMap::new).map_err(js_err)?;
        let report = evaluate_maps(&[pred], &[self.series.densities[i].clone()], &[k]).map_err(js_err)?;
        Ok(report.results[0].pmae)
    }
}

/// Density map for heads at (`xs[i]`, `ys[i]`) in pixel coordinates.
#[wasm_bindgen]
pub fn density_from_heads(xs: Vec<f64>, ys: Vec<f64>, height: usize, width: usize, beta: f64, knn: usize) -> Result<Vec<f64>, JsError> {
    if xs.len() != ys.len() {
        return Err(JsError::new("xs and ys differ in length"));
    }
    let heads: Vec<_> = xs.into_iter().zip(ys).collect();
    let cfg = KernelConfig {
        beta,
        knn,
        ..KernelConfig::default()
    };
    cfg.validate().map_err(js_err)?;
    let d = synth_density(&heads, height, width, &cfg).map_err(js_err)?;
    Ok(d.grid().values().to_vec())
}
