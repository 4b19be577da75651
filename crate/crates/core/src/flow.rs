//! Dense optical flow (coarse-to-fine Horn–Schunck) and mass-preserving
//! forward warping of density maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityMap, FlowField, Frame, Grid2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Smoothness weight, in 8-bit intensity units.
    pub alpha: f64,
    pub iterations: usize,
    pub levels: usize,
    /// Gaussian pre-smoothing of the input frames (px).
    pub presmooth: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            iterations: 100,
            levels: 3,
            presmooth: 1.0,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.iterations == 0 || self.levels == 0 || !(self.presmooth > 0.0) {
            return Err(Error::Config(format!("invalid flow parameters {self:?}")));
        }
        Ok(())
    }
}

/// Minimal row-major f64 image used inside the solver.
#[derive(Clone)]
struct Img {
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Img {
    fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, d: vec![0.0; h * w] }
    }

    fn from_grid(g: &Grid2D, scale: f64) -> Self {
        Self {
            h: g.height(),
            w: g.width(),
            d: g.values().iter().map(|v| v * scale).collect(),
        }
    }

    #[inline]
    fn at(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.h as isize - 1) as usize;
        let c = c.clamp(0, self.w as isize - 1) as usize;
        self.d[r * self.w + c]
    }

    /// Bilinear sample with replicated borders.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as isize, x.floor() as isize);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx;
        let bot = self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn blur(&self, sigma: f64) -> Img {
        let radius = (3.0 * sigma).ceil() as isize;
        let k: Vec<f64> = (-radius..=radius)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = k.iter().sum();
        let mut tmp = Img::zeros(self.h, self.w);
        for r in 0..self.h {
            for c in 0..self.w {
                let mut acc = 0.0;
                for (i, w) in k.iter().enumerate() {
                    acc += w * self.at(r as isize, c as isize + i as isize - radius);
                }
                tmp.d[r * self.w + c] = acc / norm;
            }
        }
        let mut out = Img::zeros(self.h, self.w);
        for r in 0..self.h {
            for c in 0..self.w {
                let mut acc = 0.0;
                for (i, w) in k.iter().enumerate() {
                    acc += w * tmp.at(r as isize + i as isize - radius, c as isize);
                }
                out.d[r * self.w + c] = acc / norm;
            }
        }
        out
    }

    /// Halves resolution by 2x2 block averaging (odd edges replicate).
    fn downsample(&self) -> Img {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut out = Img::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let (r2, c2) = (2 * r as isize, 2 * c as isize);
                out.d[r * w + c] =
                    0.25 * (self.at(r2, c2) + self.at(r2, c2 + 1) + self.at(r2 + 1, c2) + self.at(r2 + 1, c2 + 1));
            }
        }
        out
    }

    /// Resamples to `h x w` on the pixel-centre grid, multiplying values by `gain`.
    fn upsample_to(&self, h: usize, w: usize, gain: f64) -> Img {
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        let mut out = Img::zeros(h, w);
        for r in 0..h {
            let y = (r as f64 + 0.5) * sy - 0.5;
            for c in 0..w {
                let x = (c as f64 + 0.5) * sx - 0.5;
                out.d[r * w + c] = gain * self.sample(y, x);
            }
        }
        out
    }

    fn into_grid(self) -> Grid2D {
        Grid2D::new(self.h, self.w, self.d).expect("flow solver produced non-finite values")
    }
}

/// Horn–Schunck neighbourhood average (1/6 edge, 1/12 corner neighbours).
fn neighbour_mean(f: &Img, r: usize, c: usize) -> f64 {
    let (r, c) = (r as isize, c as isize);
    (f.at(r - 1, c) + f.at(r + 1, c) + f.at(r, c - 1) + f.at(r, c + 1)) / 6.0
        + (f.at(r - 1, c - 1) + f.at(r - 1, c + 1) + f.at(r + 1, c - 1) + f.at(r + 1, c + 1)) / 12.0
}

/// Refines `(u, v)` at one pyramid level: warps `f2` by the current flow and
/// runs the classical Horn–Schunck iteration on the linearised residual.
fn refine_level(f1: &Img, f2: &Img, u: &mut Img, v: &mut Img, p: &FlowParams) {
    let (h, w) = (f1.h, f1.w);
    let mut warped = Img::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            warped.d[i] = f2.sample(r as f64 + v.d[i], c as f64 + u.d[i]);
        }
    }
    let mut ix = Img::zeros(h, w);
    let mut iy = Img::zeros(h, w);
    let mut it = Img::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            let i = r * w + c;
            let gx = 0.25 * (f1.at(ri, ci + 1) - f1.at(ri, ci - 1) + warped.at(ri, ci + 1) - warped.at(ri, ci - 1));
            let gy = 0.25 * (f1.at(ri + 1, ci) - f1.at(ri - 1, ci) + warped.at(ri + 1, ci) - warped.at(ri - 1, ci));
            ix.d[i] = gx;
            iy.d[i] = gy;
            // Residual linearised about the current flow.
            it.d[i] = warped.d[i] - f1.d[i] - gx * u.d[i] - gy * v.d[i];
        }
    }
    let a2 = p.alpha * p.alpha;
    let mut nu = Img::zeros(h, w);
    let mut nv = Img::zeros(h, w);
    for _ in 0..p.iterations {
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let ub = neighbour_mean(u, r, c);
                let vb = neighbour_mean(v, r, c);
                let (gx, gy) = (ix.d[i], iy.d[i]);
                let k = (gx * ub + gy * vb + it.d[i]) / (a2 + gx * gx + gy * gy);
                nu.d[i] = ub - gx * k;
                nv.d[i] = vb - gy * k;
            }
        }
        std::mem::swap(u, &mut nu);
        std::mem::swap(v, &mut nv);
    }
}

/// Coarse-to-fine Horn–Schunck flow from `f1` to `f2`: `f2(x + flow(x)) ≈ f1(x)`.
pub fn estimate_flow(f1: &Frame, f2: &Frame, p: &FlowParams) -> Result<FlowField> {
    p.validate()?;
    if f1.dims() != f2.dims() {
        return Err(Error::DimensionMismatch(format!(
            "frames are {:?} and {:?}",
            f1.dims(),
            f2.dims()
        )));
    }
    let (h, w) = f1.dims();
    if h < 16 || w < 16 {
        return Err(Error::InvalidValue(format!("frames must be at least 16x16, got {h}x{w}")));
    }
    // The smoothness weight is calibrated for 8-bit intensities.
    let mut pyr1 = vec![Img::from_grid(f1.grid(), 255.0).blur(p.presmooth)];
    let mut pyr2 = vec![Img::from_grid(f2.grid(), 255.0).blur(p.presmooth)];
    while pyr1.len() < p.levels {
        let last = pyr1.last().unwrap();
        if last.h.min(last.w) < 8 {
            break;
        }
        let next1 = last.downsample();
        let next2 = pyr2.last().unwrap().downsample();
        pyr1.push(next1);
        pyr2.push(next2);
    }
    let coarsest = pyr1.last().unwrap();
    let mut u = Img::zeros(coarsest.h, coarsest.w);
    let mut v = Img::zeros(coarsest.h, coarsest.w);
    for level in (0..pyr1.len()).rev() {
        let (f1l, f2l) = (&pyr1[level], &pyr2[level]);
        if u.h != f1l.h || u.w != f1l.w {
            let gain_x = f1l.w as f64 / u.w as f64;
            let gain_y = f1l.h as f64 / u.h as f64;
            u = u.upsample_to(f1l.h, f1l.w, gain_x);
            v = v.upsample_to(f1l.h, f1l.w, gain_y);
        }
        refine_level(f1l, f2l, &mut u, &mut v, p);
    }
    FlowField::new(u.into_grid(), v.into_grid())
}

/// Forward-splats each cell's mass to `(x + u, y + v)` with bilinear
/// weights; mass landing outside the image is dropped.
pub fn warp_density(density: &DensityMap, flow: &FlowField) -> Result<DensityMap> {
    if density.dims() != flow.dims() {
        return Err(Error::DimensionMismatch(format!(
            "density {:?} vs flow {:?}",
            density.dims(),
            flow.dims()
        )));
    }
    let (h, w) = density.dims();
    let src = density.grid().values();
    let (fu, fv) = (flow.u().values(), flow.v().values());
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mass = src[i];
            if mass == 0.0 {
                continue;
            }
            let x = c as f64 + fu[i];
            let y = r as f64 + fv[i];
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let weight = wx * wy;
                    if weight == 0.0 {
                        continue;
                    }
                    let (rr, cc) = (y0 + dy, x0 + dx);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        out[rr as usize * w + cc as usize] += mass * weight;
                    }
                }
            }
        }
    }
    DensityMap::new(Grid2D::new(h, w, out)?)
}

/// Flow+density baseline: the flow over the last observed interval is
/// applied once more to the most recent density map.
pub fn baseline_flow_density(prev: &Frame, last: &Frame, d_last: &DensityMap, p: &FlowParams) -> Result<DensityMap> {
    if d_last.dims() != last.dims() {
        return Err(Error::DimensionMismatch(format!(
            "density {:?} vs frame {:?}",
            d_last.dims(),
            last.dims()
        )));
    }
    let flow = estimate_flow(prev, last, p)?;
    warp_density(d_last, &flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(g: Grid2D) -> Frame {
        Frame::new(g).unwrap()
    }

    #[test]
    fn identical_frames_zero_flow() {
        let t = crate::synth::smooth_texture(24, 24, 2.0, 3, 0.1, 0.9);
        let f = estimate_flow(&frame(t.clone()), &frame(t), &FlowParams::default()).unwrap();
        assert!(f.u().values().iter().all(|&v| v == 0.0));
        assert!(f.v().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_shift_recovered_in_interior() {
        // Wrap-around texture, so the cyclic shift is an exact translation.
        let n = 48;
        let t = crate::synth::smooth_texture(n, n, 2.5, 5, 0.1, 0.9);
        let shifted = Grid2D::from_fn(n, n, |r, c| t.get(r, (c + n - 1) % n)).unwrap();
        let f = estimate_flow(&frame(t), &frame(shifted), &FlowParams::default()).unwrap();
        let mut errs: Vec<f64> = (8..n - 8)
            .flat_map(|r| (8..n - 8).map(move |c| (r, c)))
            .map(|(r, c)| (f.u().get(r, c) - 1.0).hypot(f.v().get(r, c)))
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[errs.len() / 2] < 0.25, "median error {}", errs[errs.len() / 2]);
    }

    #[test]
    fn constant_frames_zero_flow() {
        let a = frame(Grid2D::filled(16, 20, 0.3));
        let b = frame(Grid2D::filled(16, 20, 0.7));
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        assert!(f.u().values().iter().chain(f.v().values()).all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_and_tiny_frames() {
        let a = frame(Grid2D::zeros(16, 16));
        let b = frame(Grid2D::zeros(16, 17));
        assert!(matches!(
            estimate_flow(&a, &b, &FlowParams::default()),
            Err(Error::DimensionMismatch(_))
        ));
        let c = frame(Grid2D::zeros(8, 8));
        assert!(estimate_flow(&c, &c, &FlowParams::default()).is_err());
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let d = DensityMap::new(Grid2D::from_fn(8, 9, |r, c| (r * c) as f64 * 0.01).unwrap()).unwrap();
        assert_eq!(warp_density(&d, &FlowField::zeros(8, 9)).unwrap(), d);
    }

    #[test]
    fn impulse_integer_shift() {
        let mut g = vec![0.0; 100];
        g[5 * 10 + 5] = 1.0;
        let d = DensityMap::new(Grid2D::new(10, 10, g).unwrap()).unwrap();
        let flow = FlowField::new(Grid2D::filled(10, 10, 1.0), Grid2D::zeros(10, 10)).unwrap();
        let out = warp_density(&d, &flow).unwrap();
        assert_eq!(out.grid().get(5, 6), 1.0);
        assert_eq!(out.count(), 1.0);
    }

    #[test]
    fn mass_leaving_is_dropped() {
        let mut g = vec![0.0; 16];
        g[3] = 2.0;
        let d = DensityMap::new(Grid2D::new(4, 4, g).unwrap()).unwrap();
        let flow = FlowField::new(Grid2D::filled(4, 4, 0.5), Grid2D::zeros(4, 4)).unwrap();
        assert!((warp_density(&d, &flow).unwrap().count() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_density_baseline() {
        let t = crate::synth::smooth_texture(16, 16, 2.0, 1, 0.1, 0.9);
        let f = frame(t);
        let d = DensityMap::zeros(16, 16);
        assert_eq!(baseline_flow_density(&f, &f, &d, &FlowParams::default()).unwrap(), d);
    }
}
