//! Parameterised building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Padding, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// 2-D convolution with weight `(C_out, C_in, k, k)` and bias `(1, C_out, 1, 1)`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = fan_in_bound(c_in * kernel * kernel);
        let weight = store.add(format!("{name}.w"), Tensor4::uniform([c_out, c_in, kernel, kernel], bound, rng))?;
        let bias = Some(store.add(format!("{name}.b"), Tensor4::uniform([1, c_out, 1, 1], bound, rng))?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Stride-1 same-padded convolution with zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), Tensor4::zeros([c_out, c_in, kernel, kernel]))?;
        let bias = Some(store.add(format!("{name}.b"), Tensor4::zeros([1, c_out, 1, 1]))?);
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: Padding::Same,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed convolution with weight `(C_in, C_out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Each output pixel sees about c_in * (k/stride)^2 inputs.
        let per_axis = kernel.div_ceil(stride);
        let bound = fan_in_bound(c_in * per_axis * per_axis);
        let weight = store.add(format!("{name}.w"), Tensor4::uniform([c_in, c_out, kernel, kernel], bound, rng))?;
        let bias = store.add(format!("{name}.b"), Tensor4::uniform([1, c_out, 1, 1], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Convolutional LSTM cell with per-channel peepholes.
///
/// The eight gate kernels are stored as one `(4 C_h, C_x + C_h, k, k)`
/// weight applied to `[x; h]`, gate order `i, f, c, o`.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub c_in: usize,
    pub c_hidden: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub peep_i: ParamId,
    pub peep_f: ParamId,
    pub peep_o: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl ConvLstmCell {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_hidden: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: ConvLSTM kernel must be odd, got {kernel}")));
        }
        let bound = fan_in_bound((c_in + c_hidden) * kernel * kernel);
        let weight = store.add(
            format!("{name}.w"),
            Tensor4::uniform([4 * c_hidden, c_in + c_hidden, kernel, kernel], bound, rng),
        )?;
        let mut b = Tensor4::zeros([1, 4 * c_hidden, 1, 1]);
        b.data_mut()[c_hidden..2 * c_hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.b"), b)?;
        let peep = |store: &mut ParamStore, gate: &str| store.add(format!("{name}.p_{gate}"), Tensor4::zeros([1, c_hidden, 1, 1]));
        let peep_i = peep(store, "i")?;
        let peep_f = peep(store, "f")?;
        let peep_o = peep(store, "o")?;
        Ok(Self {
            c_in,
            c_hidden,
            kernel,
            weight,
            bias,
            peep_i,
            peep_f,
            peep_o,
        })
    }

    /// Zero state matching `x`'s batch and spatial size.
    pub fn zero_state(&self, g: &mut Graph, x: Var) -> LstmState {
        let [b, _, h, w] = g.shape(x);
        let h0 = g.constant(Tensor4::zeros([b, self.c_hidden, h, w]));
        let c0 = g.constant(Tensor4::zeros([b, self.c_hidden, h, w]));
        LstmState { h: h0, c: c0 }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, prev: Option<LstmState>) -> Result<LstmState> {
        let [_, cx, _, _] = g.shape(x);
        if cx != self.c_in {
            return Err(Error::Shape {
                left: g.shape(x).to_vec(),
                right: vec![self.c_in],
                context: "convlstm input channels",
            });
        }
        let prev = match prev {
            Some(s) => s,
            None => self.zero_state(g, x),
        };
        let [xb, _, xh, xw] = g.shape(x);
        let [hb, hc, hh, hw] = g.shape(prev.h);
        if [xb, xh, xw] != [hb, hh, hw] || hc != self.c_hidden || g.shape(prev.c) != g.shape(prev.h) {
            return Err(Error::Shape {
                left: g.shape(x).to_vec(),
                right: g.shape(prev.h).to_vec(),
                context: "convlstm input vs state",
            });
        }
        let ch = self.c_hidden;
        let xh_cat = g.concat(&[x, prev.h])?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let z = g.conv2d(xh_cat, w, Some(b), 1, Padding::Same)?;
        let peep = [self.peep_i, self.peep_f, self.peep_o].map(|p| g.param(store, p));
        let hc = g.lstm_gates(z, prev.c, peep)?;
        let h = g.slice_channels(hc, 0, ch)?;
        let c = g.slice_channels(hc, ch, ch)?;
        Ok(LstmState { h, c })
    }
}

/// Channel attention followed by spatial attention.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub mlp_in: Conv,
    pub mlp_out: Conv,
    pub spatial: Conv,
}

impl Cbam {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, spatial_kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: spatial attention kernel must be odd, got {spatial_kernel}")));
        }
        let hidden = (channels / reduction.max(1)).max(1);
        let mlp_in = Conv::new(store, &format!("{name}.mlp1"), channels, hidden, 1, 1, Padding::Valid, rng)?;
        let mlp_out = Conv::new(store, &format!("{name}.mlp2"), hidden, channels, 1, 1, Padding::Valid, rng)?;
        let spatial = Conv::new(store, &format!("{name}.spatial"), 2, 1, spatial_kernel, 1, Padding::Same, rng)?;
        Ok(Self { mlp_in, mlp_out, spatial })
    }

    fn mlp(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.mlp_in.forward(g, store, x)?;
        let h = g.relu(h);
        self.mlp_out.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let avg = g.global_avg_pool(x);
        let max = g.global_max_pool(x);
        let a = self.mlp(g, store, avg)?;
        let m = self.mlp(g, store, max)?;
        let s = g.add(a, m)?;
        let ca = g.sigmoid(s);
        let x1 = g.mul_broadcast(x, ca)?;
        let mean = g.channel_mean(x1);
        let cmax = g.channel_max(x1);
        let pooled = g.concat(&[mean, cmax])?;
        let sa = self.spatial.forward(g, store, pooled)?;
        let sa = g.sigmoid(sa);
        g.mul_broadcast(x1, sa)
    }
}

/// Normalised 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Mean local SSIM between `x` and `y` with an 11x11 Gaussian window
/// (sigma 1.5). Near the border the window is truncated and renormalised.
pub fn ssim(g: &mut Graph, x: Var, y: Var, dynamic_range: f64) -> Result<Var> {
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::InvalidValue(format!("SSIM dynamic range must be positive, got {dynamic_range}")));
    }
    if g.shape(x) != g.shape(y) {
        return Err(Error::Shape {
            left: g.shape(x).to_vec(),
            right: g.shape(y).to_vec(),
            context: "ssim",
        });
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let shape = g.shape(x);

    let ones = g.constant(Tensor4::filled(shape, 1.0));
    let norm = g.blur(ones, &kernel)?;
    let inv = g.value(norm).map(|v| 1.0 / v);
    let inv = g.constant(inv);

    let local_mean = |g: &mut Graph, v: Var| -> Result<Var> {
        let b = g.blur(v, &kernel)?;
        g.mul(b, inv)
    };
    let mx = local_mean(g, x)?;
    let my = local_mean(g, y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = local_mean(g, xx)?;
    let eyy = local_mean(g, yy)?;
    let exy = local_mean(g, xy)?;

    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;

    let n1 = g.affine(mxy, 2.0, c1);
    let n2 = g.affine(cxy, 2.0, c2);
    let num = g.mul(n1, n2)?;
    let d1 = g.add(mx2, my2)?;
    let d1 = g.affine(d1, 1.0, c1);
    let d2 = g.add(vx, vy)?;
    let d2 = g.affine(d2, 1.0, c2);
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

pub fn mse(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let d2 = g.mul(d, d)?;
    Ok(g.mean(d2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn fused_gates_match_scalar_lstm_equations() {
        let mut r = rng();
        let (b, c, h, w) = (2, 3, 2, 4);
        let z = Tensor4::uniform([b, 4 * c, h, w], 3.0, &mut r);
        let cp = Tensor4::uniform([b, c, h, w], 2.0, &mut r);
        let peeps: Vec<_> = (0..3).map(|_| Tensor4::uniform([1, c, 1, 1], 1.0, &mut r)).collect();
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let cv = g.constant(cp.clone());
        let pv: Vec<_> = peeps.iter().map(|p| g.constant(p.clone())).collect();
        let out = g.lstm_gates(zv, cv, [pv[0], pv[1], pv[2]]).unwrap();
        let out = g.value(out);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let hw = h * w;
        for bi in 0..b {
            for ch in 0..c {
                let (pi, pf, po) = (peeps[0].data()[ch], peeps[1].data()[ch], peeps[2].data()[ch]);
                for k in 0..hw {
                    let gate = |q: usize| z.plane(bi, q * c + ch)[k];
                    let c0 = cp.plane(bi, ch)[k];
                    let i = sig(gate(0) + pi * c0);
                    let f = sig(gate(1) + pf * c0);
                    let c1 = f * c0 + i * gate(2).tanh();
                    let o = sig(gate(3) + po * c1);
                    let h1 = o * c1.tanh();
                    assert!((out.plane(bi, ch)[k] - h1).abs() < 1e-14);
                    assert!((out.plane(bi, c + ch)[k] - c1).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn convlstm_zero_params_give_zero_state() {
        let mut store = ParamStore::new();
        let cell = ConvLstmCell::new(&mut store, "cell", 2, 3, 3, &mut rng()).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor4::uniform([1, 2, 5, 6], 1.0, &mut rng()));
        let s = cell.step(&mut g, &store, x, None).unwrap();
        assert_eq!(g.shape(s.h), [1, 3, 5, 6]);
        assert!(g.value(s.h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(s.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_saturated_forget_gate_keeps_cell() {
        let mut store = ParamStore::new();
        let cell = ConvLstmCell::new(&mut store, "cell", 1, 2, 3, &mut rng()).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        store.value_mut(cell.bias).data_mut()[2..4].iter_mut().for_each(|v| *v = 20.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor4::uniform([1, 1, 4, 4], 1.0, &mut rng()));
        let c_prev = Tensor4::uniform([1, 2, 4, 4], 1.0, &mut rng());
        let h = g.constant(Tensor4::zeros([1, 2, 4, 4]));
        let c = g.constant(c_prev.clone());
        let s = cell.step(&mut g, &store, x, Some(LstmState { h, c })).unwrap();
        for (a, b) in g.value(s.c).data().iter().zip(c_prev.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn cbam_with_open_gates_is_identity() {
        let mut store = ParamStore::new();
        let cbam = Cbam::new(&mut store, "att", 3, 2, 7, &mut rng()).unwrap();
        store.value_mut(cbam.mlp_out.weight).fill(0.0);
        store.value_mut(cbam.mlp_out.bias.unwrap()).fill(20.0);
        store.value_mut(cbam.spatial.weight).fill(0.0);
        store.value_mut(cbam.spatial.bias.unwrap()).fill(40.0);
        let input = Tensor4::uniform([1, 3, 6, 6], 1.0, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = cbam.forward(&mut g, &store, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cbam_never_amplifies() {
        let mut store = ParamStore::new();
        let cbam = Cbam::new(&mut store, "att", 4, 2, 3, &mut rng()).unwrap();
        let input = Tensor4::uniform([1, 4, 5, 5], 3.0, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = cbam.forward(&mut g, &store, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(input.data()) {
            assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = Tensor4::uniform([1, 1, 9, 12], 0.05, &mut rng()).map(f64::abs);
        let b = Tensor4::uniform([1, 1, 9, 12], 0.05, &mut ChaCha8Rng::seed_from_u64(4)).map(f64::abs);
        let mut g = Graph::new();
        let (x, y) = (g.constant(a), g.constant(b));
        let same = ssim(&mut g, x, x, 0.1).unwrap();
        assert!((g.value(same).data()[0] - 1.0).abs() < 1e-9);
        let xy = ssim(&mut g, x, y, 0.1).unwrap();
        let yx = ssim(&mut g, y, x, 0.1).unwrap();
        assert_eq!(g.value(xy).data()[0], g.value(yx).data()[0]);
        assert!(g.value(xy).data()[0] < 1.0);
        assert!(ssim(&mut g, x, y, 0.0).is_err());
    }
}
