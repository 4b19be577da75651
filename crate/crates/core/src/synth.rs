//! Ground-plane to image projection and geometry-adaptive density synthesis.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AnnotationSet, DensityMap, Frame, Grid2D};
use crate::simulator::{Scene, TrajectoryLog};

/// Projective map from ground-plane metres to image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = Error;
    fn try_from(m: [[f64; 3]; 3]) -> Result<Self> {
        Homography::new(m)
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.m
    }
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("homography has non-finite entries".into()));
        }
        let h = Self { m };
        if h.determinant().abs() <= 1e-12 {
            return Err(Error::InvalidValue(format!(
                "homography is singular (det = {})",
                h.determinant()
            )));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate.
    pub fn inverse(&self) -> Homography {
        let m = &self.m;
        let det = self.determinant();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = adj[r][c] / det;
            }
        }
        Homography { m: inv }
    }

    pub fn project_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() <= 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    pub fn project(&self, points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        points
            .iter()
            .enumerate()
            .map(|(index, &(x, y))| self.project_point(x, y).ok_or(Error::PointAtInfinity { index, x, y }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub beta: f64,
    /// Number of nearest neighbours averaged for the spread.
    pub knn: usize,
    /// Support radius in units of sigma.
    pub truncation: f64,
    /// Spread (px) used when a head has fewer than `knn` neighbours.
    pub sigma_fallback: f64,
    pub renormalize: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            knn: 3,
            truncation: 4.0,
            sigma_fallback: 4.0,
            renormalize: true,
        }
    }
}

/// Spreads below this collapse onto too few pixels to be meaningful.
const MIN_SIGMA: f64 = 0.25;

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.knn == 0 || !(self.truncation >= 2.0) || !(self.sigma_fallback > 0.0) {
            return Err(Error::Config(format!("invalid kernel config {self:?}")));
        }
        Ok(())
    }
}

/// Per-head Gaussian spreads: `beta` times the mean distance to the `knn`
/// nearest other heads, or the fallback when there are too few heads.
pub fn adaptive_sigmas(heads: &[(f64, f64)], cfg: &KernelConfig) -> Vec<f64> {
    if heads.len() <= cfg.knn {
        return vec![cfg.sigma_fallback; heads.len()];
    }
    let mut dists = Vec::with_capacity(heads.len());
    heads
        .iter()
        .enumerate()
        .map(|(i, &(xi, yi))| {
            dists.clear();
            dists.extend(
                heads
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &(xj, yj))| ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()),
            );
            dists.select_nth_unstable_by(cfg.knn - 1, f64::total_cmp);
            let nearest = &mut dists[..cfg.knn];
            nearest.sort_unstable_by(f64::total_cmp);
            let mean = nearest.iter().sum::<f64>() / cfg.knn as f64;
            cfg.beta * mean
        })
        .collect()
}

/// Geometry-adaptive density map; with `renormalize` each head contributes
/// exactly one unit of mass, border heads included.
pub fn synth_density(heads: &[(f64, f64)], height: usize, width: usize, cfg: &KernelConfig) -> Result<DensityMap> {
    cfg.validate()?;
    if height < 8 || width < 8 {
        return Err(Error::InvalidValue(format!("density map must be at least 8x8, got {height}x{width}")));
    }
    for (i, &(x, y)) in heads.iter().enumerate() {
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            return Err(Error::InvalidValue(format!(
                "head {i} at ({x}, {y}) lies outside the {width}x{height} image"
            )));
        }
    }
    let sigmas = adaptive_sigmas(heads, cfg);
    let mut values = vec![0.0; height * width];
    let mut weights: Vec<(usize, f64)> = Vec::new();
    for (&(x, y), &sigma) in heads.iter().zip(&sigmas) {
        let sigma = sigma.max(MIN_SIGMA);
        let reach = cfg.truncation * sigma;
        let col = x.floor() as i64;
        let row = y.floor() as i64;
        let span = reach.ceil() as i64 + 1;
        let inv = 1.0 / (2.0 * sigma * sigma);
        weights.clear();
        let mut total = 0.0;
        for r in (row - span).max(0)..=(row + span).min(height as i64 - 1) {
            let dy = r as f64 + 0.5 - y;
            for c in (col - span).max(0)..=(col + span).min(width as i64 - 1) {
                let dx = c as f64 + 0.5 - x;
                let d2 = dx * dx + dy * dy;
                if d2 > reach * reach {
                    continue;
                }
                let w = (-d2 * inv).exp();
                total += w;
                weights.push((r as usize * width + c as usize, w));
            }
        }
        if total <= 0.0 {
            values[row as usize * width + col as usize] += 1.0;
            continue;
        }
        let scale = if cfg.renormalize {
            1.0 / total
        } else {
            1.0 / (2.0 * std::f64::consts::PI * sigma * sigma)
        };
        for &(idx, w) in &weights {
            values[idx] += w * scale;
        }
    }
    DensityMap::new(Grid2D::new(height, width, values)?)
}

/// Image-space head positions of every agent logged at step `k`, with
/// agents outside the image dropped.
fn heads_in_image(positions: &[(f64, f64)], scene: &Scene) -> Result<Vec<(f64, f64)>> {
    let (h, w) = (scene.image.height as f64, scene.image.width as f64);
    Ok(scene
        .homography
        .project(positions)?
        .into_iter()
        .filter(|&(x, y)| x >= 0.0 && y >= 0.0 && x < w && y < h)
        .collect())
}

/// Groups a trajectory log into per-step world positions.
fn positions_by_step(log: &TrajectoryLog) -> BTreeMap<u64, Vec<(f64, f64)>> {
    let mut by_step: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &log.records {
        by_step.entry((r.t / log.dt).round() as u64).or_default().push((r.x, r.y));
    }
    by_step
}

/// Number of simulator steps per sampling interval.
pub fn steps_per_interval(interval: f64, dt: f64) -> Result<u64> {
    let ratio = interval / dt;
    let m = ratio.round();
    if !(interval > 0.0) || m < 1.0 || (ratio - m).abs() > 1e-6 * m.max(1.0) {
        return Err(Error::InvalidValue(format!(
            "sampling interval {interval} s is not a positive multiple of the simulator step {dt} s"
        )));
    }
    Ok(m as u64)
}

/// Image-space heads sampled every `interval` seconds from the log.
pub fn sample_heads(log: &TrajectoryLog, scene: &Scene, interval: f64) -> Result<Vec<(f64, Vec<(f64, f64)>)>> {
    let m = steps_per_interval(interval, log.dt)?;
    if log.is_empty() {
        return Ok(Vec::new());
    }
    let by_step = positions_by_step(log);
    let last = log.last_step().unwrap_or(0);
    let mut out = Vec::new();
    let mut k = 0;
    while k <= last {
        let world = by_step.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        out.push((k as f64 * log.dt, heads_in_image(world, scene)?));
        k += m;
    }
    Ok(out)
}

/// One density map per sampling instant `0, interval, 2*interval, ...`.
pub fn synth_sequence(log: &TrajectoryLog, scene: &Scene, interval: f64, cfg: &KernelConfig) -> Result<Vec<(f64, DensityMap)>> {
    sample_heads(log, scene, interval)?
        .into_iter()
        .map(|(t, heads)| Ok((t, synth_density(&heads, scene.image.height, scene.image.width, cfg)?)))
        .collect()
}

pub fn density_from_annotations(ann: &AnnotationSet, frame: u64, cfg: &KernelConfig) -> Result<DensityMap> {
    let heads = ann
        .heads(frame)
        .ok_or_else(|| Error::InvalidValue(format!("frame {frame} has no annotation entry")))?;
    let (h, w) = ann.dims();
    synth_density(heads, h, w, cfg)
}

/// File name used for a density map sampled at `t` seconds.
pub fn density_file_name(t: f64) -> String {
    format!("d_{}.dgrid", (t * 1000.0).round() as u64)
}

/// Smooth random intensity field in `[lo, hi]`: white noise blurred by a
/// separable Gaussian of std `smoothness` px (wrap-around), then rescaled.
pub fn smooth_texture(height: usize, width: usize, smoothness: f64, seed: u64, lo: f64, hi: f64) -> Grid2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>()).collect();
    let radius = (3.0 * smoothness).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * smoothness * smoothness)).exp())
        .collect();
    let wrap = |i: i64, n: usize| i.rem_euclid(n as i64) as usize;
    let mut tmp = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * noise[r * width + wrap(c as i64 + k as i64 - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[wrap(r as i64 + k as i64 - radius, height) * width + c])
                .sum();
        }
    }
    let (mn, mx) = out.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (mx - mn).max(1e-12);
    for v in &mut out {
        *v = lo + (hi - lo) * (*v - mn) / span;
    }
    Grid2D::new(height, width, out).expect("texture is finite")
}

/// Appearance of people in rendered frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Std of the dark blob drawn for each person (px).
    pub person_sigma: f64,
    /// Darkening at the blob centre.
    pub contrast: f64,
    pub background_smoothness: f64,
    pub background_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            person_sigma: 1.5,
            contrast: 0.6,
            background_smoothness: 3.0,
            background_seed: 7,
        }
    }
}

/// Renders a grayscale frame: a static textured background with a dark
/// blob at each head position.
pub fn render_frame(heads: &[(f64, f64)], background: &Grid2D, cfg: &RenderConfig) -> Frame {
    let (h, w) = background.dims();
    let mut values = background.values().to_vec();
    let s = cfg.person_sigma;
    let span = (3.0 * s).ceil() as i64;
    for &(x, y) in heads {
        let (col, row) = (x.floor() as i64, y.floor() as i64);
        for r in (row - span).max(0)..=(row + span).min(h as i64 - 1) {
            for c in (col - span).max(0)..=(col + span).min(w as i64 - 1) {
                let dx = c as f64 + 0.5 - x;
                let dy = r as f64 + 0.5 - y;
                let blob = cfg.contrast * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                let v = &mut values[r as usize * w + c as usize];
                *v *= 1.0 - blob;
            }
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    Frame::new(Grid2D::new(h, w, values).expect("finite frame")).expect("frame in range")
}
