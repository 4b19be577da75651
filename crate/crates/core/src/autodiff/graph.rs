//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with the
//! forward value. [`Graph::backward`] walks the tape in reverse and
//! accumulates (`+=`) gradients into the graph's input leaves and into the
//! [`ParamStore`] the parameters came from.

use std::collections::HashMap;

use super::kernels::{blur_plane, col2im, conv_direct, conv_direct_dw, conv_direct_dx, gemm, im2col, resize_matrix, Interp, Mat, PatchGeometry};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input size (stride 1, odd kernels).
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: PatchGeometry,
        /// Unfolded input of every batch item, kept for the weight gradient.
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: PatchGeometry,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        mh: Vec<f64>,
        mw: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Mean(Var),
    Sum(Var),
    Blur {
        x: Var,
        kernel: Vec<f64>,
    },
    LstmGates {
        z: Var,
        c_prev: Var,
        peep: [Var; 3],
        /// Per element: i, f, candidate, o, tanh(c).
        acts: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor4>>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(left: [usize; 4], right: [usize; 4], context: &'static str) -> Error {
    Error::Shape {
        left: left.to_vec(),
        right: right.to_vec(),
        context,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf; its gradient is available through [`Graph::grad`].
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Graph::input`].
    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let [bn, ci, h, wd] = self.shape(x);
        let [co, wci, k, k2] = self.shape(w);
        if wci != ci || k != k2 || stride == 0 {
            return Err(shape_err(self.shape(x), self.shape(w), "conv2d input vs weight"));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, co, 1, 1] {
                return Err(shape_err(self.shape(b), [1, co, 1, 1], "conv2d bias"));
            }
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 || stride != 1 {
                    return Err(shape_err(self.shape(x), self.shape(w), "same padding needs odd kernel, stride 1"));
                }
                k / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(self.shape(x), self.shape(w), "conv2d kernel larger than input"));
        }
        let geom = PatchGeometry {
            channels: ci,
            img_h: h,
            img_w: wd,
            kernel: k,
            stride,
            pad,
            cols_h: (h + 2 * pad - k) / stride + 1,
            cols_w: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, npos) = (geom.rows(), geom.positions());
        let mut out = Tensor4::zeros([bn, co, geom.cols_h, geom.cols_w]);
        let direct = use_direct(&geom, co);
        let mut cols = if geom.is_pointwise() || direct { Vec::new() } else { vec![0.0; bn * rows * npos] };
        let xv = &self.nodes[x.0].value;
        let wv = self.nodes[w.0].value.data();
        for bi in 0..bn {
            if direct {
                conv_direct(xv.item(bi), wv, &geom, out.item_mut(bi));
                continue;
            }
            let src: &[f64] = if geom.is_pointwise() {
                xv.item(bi)
            } else {
                let c = &mut cols[bi * rows * npos..(bi + 1) * rows * npos];
                im2col(xv.item(bi), &geom, c);
                c
            };
            gemm(Mat::new(wv, co, rows), Mat::new(src, rows, npos), 0.0, out.item_mut(bi));
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.nodes[b.0].value.data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        if !self.rg(w) {
            cols = Vec::new();
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Transposed convolution with weight `(C_in, C_out, k, k)`; output size
    /// `(H - 1) * stride + k - 2 * pad`. The adjoint of [`Graph::conv2d`].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [bn, ci, h, wd] = self.shape(x);
        let [wci, co, k, k2] = self.shape(w);
        if wci != ci || k != k2 || stride == 0 || (h - 1) * stride + k <= 2 * pad {
            return Err(shape_err(self.shape(x), self.shape(w), "conv_transpose2d input vs weight"));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, co, 1, 1] {
                return Err(shape_err(self.shape(b), [1, co, 1, 1], "conv_transpose2d bias"));
            }
        }
        let (ho, wo) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
        let geom = PatchGeometry {
            channels: co,
            img_h: ho,
            img_w: wo,
            kernel: k,
            stride,
            pad,
            cols_h: h,
            cols_w: wd,
        };
        let (rows, npos) = (geom.rows(), geom.positions());
        let mut out = Tensor4::zeros([bn, co, ho, wo]);
        let mut cols = vec![0.0; rows * npos];
        let xv = &self.nodes[x.0].value;
        let wv = self.nodes[w.0].value.data();
        for bi in 0..bn {
            gemm(Mat::new(wv, ci, rows).t(), Mat::new(xv.item(bi), ci, npos), 0.0, &mut cols);
            col2im(&cols, &geom, out.item_mut(bi));
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.nodes[b.0].value.data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [bn, c, h, w] = self.shape(x);
        if h < 2 || w < 2 {
            return Err(shape_err(self.shape(x), [bn, c, 2, 2], "maxpool2 needs at least 2x2"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor4::zeros([bn, c, ho, wo]);
        let mut argmax = Vec::with_capacity(bn * c * ho * wo);
        let xv = &self.nodes[x.0].value;
        for bi in 0..bn {
            for ch in 0..c {
                let src = xv.plane(bi, ch);
                let dst = out.plane_mut(bi, ch);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = (2 * oy) * w + 2 * ox;
                        for cand in [(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                            if src[cand] > src[best] {
                                best = cand;
                            }
                        }
                        dst[oy * wo + ox] = src[best];
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Separable resampling to `(h_out, w_out)`.
    pub fn resize(&mut self, x: Var, h_out: usize, w_out: usize, mode: Interp) -> Result<Var> {
        let [bn, c, h, w] = self.shape(x);
        if h_out == 0 || w_out == 0 {
            return Err(shape_err(self.shape(x), [bn, c, h_out, w_out], "resize target"));
        }
        let mh = resize_matrix(h, h_out, mode);
        let mw = resize_matrix(w, w_out, mode);
        let mut out = Tensor4::zeros([bn, c, h_out, w_out]);
        let mut tmp = vec![0.0; h * w_out];
        let xv = &self.nodes[x.0].value;
        for bi in 0..bn {
            for ch in 0..c {
                gemm(Mat::new(xv.plane(bi, ch), h, w), Mat::new(&mw, w_out, w).t(), 0.0, &mut tmp);
                gemm(Mat::new(&mh, h_out, h), Mat::new(&tmp, h, w_out), 0.0, out.plane_mut(bi, ch));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, mh, mw }, rg))
    }

    pub fn upsample(&mut self, x: Var, factor: usize, mode: Interp) -> Result<Var> {
        let [_, _, h, w] = self.shape(x);
        self.resize(x, h * factor, w * factor, mode)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, tanh, Op::Tanh(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, ctx: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(sa, sb, ctx));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor4::from_vec(sa, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    fn broadcast_strides(&self, x: Var, y: Var, ctx: &'static str) -> Result<[usize; 4]> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if (0..4).any(|d| sy[d] != sx[d] && sy[d] != 1) {
            return Err(shape_err(sx, sy, ctx));
        }
        let dense = [sy[1] * sy[2] * sy[3], sy[2] * sy[3], sy[3], 1];
        let mut strides = [0; 4];
        for d in 0..4 {
            strides[d] = if sy[d] == 1 { 0 } else { dense[d] };
        }
        Ok(strides)
    }

    fn broadcast(&mut self, x: Var, y: Var, mul: bool) -> Result<Var> {
        let ctx = if mul { "mul_broadcast" } else { "add_broadcast" };
        let strides = self.broadcast_strides(x, y, ctx)?;
        let sx = self.shape(x);
        let xv = self.nodes[x.0].value.data();
        let yv = self.nodes[y.0].value.data();
        let mut out = Vec::with_capacity(xv.len());
        let mut i = 0;
        for b in 0..sx[0] {
            for c in 0..sx[1] {
                for h in 0..sx[2] {
                    let base = b * strides[0] + c * strides[1] + h * strides[2];
                    for w in 0..sx[3] {
                        let yy = yv[base + w * strides[3]];
                        out.push(if mul { xv[i] * yy } else { xv[i] + yy });
                        i += 1;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(y);
        let op = if mul { Op::MulBroadcast(x, y) } else { Op::AddBroadcast(x, y) };
        Ok(self.push(Tensor4::from_vec(sx, out)?, op, rg))
    }

    /// `x + y` where each axis of `y` equals that of `x` or is 1.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        self.broadcast(x, y, false)
    }

    /// `x * y` where each axis of `y` equals that of `x` or is 1.
    pub fn mul_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        self.broadcast(x, y, true)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidValue("concat of nothing".into()))?;
        let [bn, _, h, w] = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != bn || s[2] != h || s[3] != w {
                return Err(shape_err(self.shape(first), s, "concat"));
            }
            channels += s[1];
        }
        let mut out = Tensor4::zeros([bn, channels, h, w]);
        for bi in 0..bn {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.item(bi);
                let dst = out.item_mut(bi);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [bn, c, h, w] = self.shape(x);
        if len == 0 || start + len > c {
            return Err(shape_err(self.shape(x), [bn, start + len, h, w], "slice_channels"));
        }
        let mut out = Tensor4::zeros([bn, len, h, w]);
        let hw = h * w;
        for bi in 0..bn {
            let src = &self.nodes[x.0].value.item(bi)[start * hw..(start + len) * hw];
            out.item_mut(bi).copy_from_slice(src);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// Pointwise ConvLSTM update. `z` holds the gate pre-activations
    /// (i, f, candidate, o) as `4C` channels and `peep` the per-channel
    /// peephole weights for i, f and o. Returns `(B, 2C, H, W)` with the new
    /// hidden state in the first `C` channels and the new cell state after.
    pub fn lstm_gates(&mut self, z: Var, c_prev: Var, peep: [Var; 3]) -> Result<Var> {
        let [bn, c, h, w] = self.shape(c_prev);
        if self.shape(z) != [bn, 4 * c, h, w] {
            return Err(shape_err(self.shape(z), [bn, 4 * c, h, w], "lstm gates vs cell state"));
        }
        for &p in &peep {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(shape_err(self.shape(p), [1, c, 1, 1], "lstm peephole"));
            }
        }
        let hw = h * w;
        let n = c * hw;
        let zv = self.nodes[z.0].value.data();
        let cp = self.nodes[c_prev.0].value.data();
        let [pi, pf, po] = peep.map(|p| self.nodes[p.0].value.data());
        let mut out = vec![0.0; 2 * bn * n];
        let mut acts = vec![0.0; 5 * bn * n];
        for b in 0..bn {
            let zb = &zv[b * 4 * n..(b + 1) * 4 * n];
            for ch in 0..c {
                for k in ch * hw..(ch + 1) * hw {
                    let e = b * n + k;
                    let cprev = cp[e];
                    let i = sigmoid(zb[k] + pi[ch] * cprev);
                    let f = sigmoid(zb[n + k] + pf[ch] * cprev);
                    let cand = tanh(zb[2 * n + k]);
                    let cell = f * cprev + i * cand;
                    let o = sigmoid(zb[3 * n + k] + po[ch] * cell);
                    let tc = tanh(cell);
                    out[2 * b * n + k] = o * tc;
                    out[2 * b * n + n + k] = cell;
                    acts[5 * e..5 * e + 5].copy_from_slice(&[i, f, cand, o, tc]);
                }
            }
        }
        let rg = self.rg(z) || self.rg(c_prev) || peep.iter().any(|&p| self.rg(p));
        let out = Tensor4::from_vec([bn, 2 * c, h, w], out)?;
        Ok(self.push(out, Op::LstmGates { z, c_prev, peep, acts }, rg))
    }

    /// Spatial mean per channel: `(B, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let data = (0..bn)
            .flat_map(|b| (0..c).map(move |ch| (b, ch)))
            .map(|(b, ch)| xv.plane(b, ch).iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor4::from_vec([bn, c, 1, 1], data).unwrap(), Op::GlobalAvgPool(x), rg)
    }

    /// Spatial max per channel: `(B, C, 1, 1)`.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let [bn, c, _, _] = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(bn * c);
        let mut argmax = Vec::with_capacity(bn * c);
        for b in 0..bn {
            for ch in 0..c {
                let plane = xv.plane(b, ch);
                let mut best = 0;
                for (i, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = i;
                    }
                }
                data.push(plane[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor4::from_vec([bn, c, 1, 1], data).unwrap(), Op::GlobalMaxPool { x, argmax }, rg)
    }

    /// Mean over channels: `(B, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = self.shape(x);
        let mut out = Tensor4::zeros([bn, 1, h, w]);
        let xv = &self.nodes[x.0].value;
        for b in 0..bn {
            let dst = out.plane_mut(b, 0);
            for ch in 0..c {
                for (d, s) in dst.iter_mut().zip(xv.plane(b, ch)) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        let rg = self.rg(x);
        self.push(out, Op::ChannelMean(x), rg)
    }

    /// Max over channels: `(B, 1, H, W)`; ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let [bn, c, h, w] = self.shape(x);
        let hw = h * w;
        let mut out = Tensor4::zeros([bn, 1, h, w]);
        let mut argmax = vec![0usize; bn * hw];
        let xv = &self.nodes[x.0].value;
        for b in 0..bn {
            let item = xv.item(b);
            let dst = out.plane_mut(b, 0);
            for p in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if item[ch * hw + p] > item[best * hw + p] {
                        best = ch;
                    }
                }
                dst[p] = item[best * hw + p];
                argmax[b * hw + p] = best;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ChannelMax { x, argmax }, rg)
    }

    /// Mean of all entries as a `(1, 1, 1, 1)` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor4::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(Tensor4::scalar(s), Op::Sum(x), rg)
    }

    /// Zero-padded separable blur of every plane with a symmetric kernel.
    pub fn blur(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        if kernel.len() % 2 == 0 || (0..kernel.len()).any(|i| kernel[i] != kernel[kernel.len() - 1 - i]) {
            return Err(Error::InvalidValue("blur kernel must be odd-length and symmetric".into()));
        }
        let [bn, c, h, w] = self.shape(x);
        let mut out = Tensor4::zeros([bn, c, h, w]);
        for b in 0..bn {
            for ch in 0..c {
                blur_plane(self.nodes[x.0].value.plane(b, ch), h, w, kernel, out.plane_mut(b, ch));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Blur {
                x,
                kernel: kernel.to_vec(),
            },
            rg,
        ))
    }

    /// Runs the reverse pass from `root`, seeding its gradient with ones.
    /// Gradients are added to existing leaf and parameter gradients.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) {
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor4::filled(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, store);
        }
    }

    fn propagate(&mut self, i: usize, g: Tensor4, grads: &mut [Option<Tensor4>], store: &mut ParamStore) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor4| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => match &mut self.leaf_grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
            Op::Conv2d { x, w, b, geom, cols: saved } => {
                let (xv, wv) = (val(*x), val(*w));
                let [bn, co, _, _] = out.shape();
                let (rows, npos) = (geom.rows(), geom.positions());
                let mut dw = rg(*w).then(|| Tensor4::zeros(wv.shape()));
                let mut dx = rg(*x).then(|| Tensor4::zeros(xv.shape()));
                let direct = use_direct(geom, co);
                let mut cols = vec![0.0; if geom.is_pointwise() || direct || !rg(*x) { 0 } else { rows * npos }];
                for bi in 0..bn {
                    let gi = g.item(bi);
                    if direct {
                        if let Some(dw) = dw.as_mut() {
                            conv_direct_dw(gi, xv.item(bi), geom, dw.data_mut());
                        }
                        if let Some(dx) = dx.as_mut() {
                            conv_direct_dx(gi, wv.data(), geom, dx.item_mut(bi));
                        }
                        continue;
                    }
                    if let Some(dw) = dw.as_mut() {
                        let src: &[f64] = if geom.is_pointwise() {
                            xv.item(bi)
                        } else {
                            &saved[bi * rows * npos..(bi + 1) * rows * npos]
                        };
                        gemm(Mat::new(gi, co, npos), Mat::new(src, rows, npos).t(), 1.0, dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        if geom.is_pointwise() {
                            gemm(Mat::new(wv.data(), co, rows).t(), Mat::new(gi, co, npos), 1.0, dx.item_mut(bi));
                        } else {
                            gemm(Mat::new(wv.data(), co, rows).t(), Mat::new(gi, co, npos), 0.0, &mut cols);
                            col2im(&cols, geom, dx.item_mut(bi));
                        }
                    }
                }
                if let Some(b) = b {
                    if rg(*b) {
                        acc(*b, channel_sums(&g));
                    }
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let [bn, ci, _, _] = xv.shape();
                let (rows, npos) = (geom.rows(), geom.positions());
                let mut dw = rg(*w).then(|| Tensor4::zeros(wv.shape()));
                let mut dx = rg(*x).then(|| Tensor4::zeros(xv.shape()));
                let mut gcols = vec![0.0; rows * npos];
                for bi in 0..bn {
                    im2col(g.item(bi), geom, &mut gcols);
                    if let Some(dw) = dw.as_mut() {
                        gemm(Mat::new(xv.item(bi), ci, npos), Mat::new(&gcols, rows, npos).t(), 1.0, dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(Mat::new(wv.data(), ci, rows), Mat::new(&gcols, rows, npos), 1.0, dx.item_mut(bi));
                    }
                }
                if let Some(b) = b {
                    if rg(*b) {
                        acc(*b, channel_sums(&g));
                    }
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = val(*x).shape();
                let mut dx = Tensor4::zeros(xs);
                let [bn, c, ho, wo] = out.shape();
                let mut k = 0;
                for b in 0..bn {
                    for ch in 0..c {
                        let gp = g.plane(b, ch);
                        let dp = dx.plane_mut(b, ch);
                        for gv in gp.iter().take(ho * wo) {
                            dp[argmax[k]] += gv;
                            k += 1;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Resize { x, mh, mw } => {
                let xs = val(*x).shape();
                let [bn, c, h, w] = xs;
                let [_, _, ho, wo] = out.shape();
                let mut dx = Tensor4::zeros(xs);
                let mut tmp = vec![0.0; h * wo];
                for b in 0..bn {
                    for ch in 0..c {
                        gemm(Mat::new(mh, ho, h).t(), Mat::new(g.plane(b, ch), ho, wo), 0.0, &mut tmp);
                        gemm(Mat::new(&tmp, h, wo), Mat::new(mw, wo, w), 0.0, dx.plane_mut(b, ch));
                    }
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                // Subgradient 1 at the kink, so a zero-initialised head feeding the
                // output ReLU still receives gradient.
                let d = zip_map(&g, xv, |gv, v| if v >= 0.0 { gv } else { 0.0 });
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(&g, out, |gv, s| gv * s * (1.0 - s));
                acc(*x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(&g, out, |gv, t| gv * (1.0 - t * t));
                acc(*x, d);
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                acc(*x, g.map(|v| v * s));
            }
            Op::Add(a, b) => {
                if rg(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    acc(*b, g.map(|v| -v));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, zip_map(&g, val(*b), |gv, bv| gv * bv));
                }
                if rg(*b) {
                    acc(*b, zip_map(&g, val(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if rg(*a) {
                    acc(*a, zip_map(&g, bv, |gv, d| gv / d));
                }
                if rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_map(out, bv, |o, d| -o / d);
                    acc(*b, zip_map(&g, &q, |gv, qv| gv * qv));
                }
            }
            Op::AddBroadcast(x, y) | Op::MulBroadcast(x, y) => {
                let is_mul = matches!(nodes[i].op, Op::MulBroadcast(..));
                let (xv, yv) = (val(*x), val(*y));
                let sx = xv.shape();
                let sy = yv.shape();
                let dense = [sy[1] * sy[2] * sy[3], sy[2] * sy[3], sy[3], 1];
                let strides: Vec<usize> = (0..4).map(|d| if sy[d] == 1 { 0 } else { dense[d] }).collect();
                let mut dx = rg(*x).then(|| Tensor4::zeros(sx));
                let mut dy = rg(*y).then(|| Tensor4::zeros(sy));
                let (gd, xd, yd) = (g.data(), xv.data(), yv.data());
                let mut k = 0;
                for b in 0..sx[0] {
                    for c in 0..sx[1] {
                        for h in 0..sx[2] {
                            let base = b * strides[0] + c * strides[1] + h * strides[2];
                            for w in 0..sx[3] {
                                let j = base + w * strides[3];
                                if let Some(dx) = dx.as_mut() {
                                    dx.data_mut()[k] += if is_mul { gd[k] * yd[j] } else { gd[k] };
                                }
                                if let Some(dy) = dy.as_mut() {
                                    dy.data_mut()[j] += if is_mul { gd[k] * xd[k] } else { gd[k] };
                                }
                                k += 1;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dy) = dy {
                    acc(*y, dy);
                }
            }
            Op::Concat(parts) => {
                let bn = out.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let sp = val(p).shape();
                    let n = sp[1] * sp[2] * sp[3];
                    if rg(p) {
                        let mut d = Tensor4::zeros(sp);
                        for b in 0..bn {
                            d.item_mut(b).copy_from_slice(&g.item(b)[offset..offset + n]);
                        }
                        acc(p, d);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                let sx = val(*x).shape();
                let hw = sx[2] * sx[3];
                let len = out.shape()[1];
                let mut d = Tensor4::zeros(sx);
                for b in 0..sx[0] {
                    d.item_mut(b)[start * hw..(start + len) * hw].copy_from_slice(g.item(b));
                }
                acc(*x, d);
            }
            Op::GlobalAvgPool(x) => {
                let sx = val(*x).shape();
                let n = (sx[2] * sx[3]) as f64;
                let mut d = Tensor4::zeros(sx);
                for b in 0..sx[0] {
                    for c in 0..sx[1] {
                        let gv = g.data()[b * sx[1] + c] / n;
                        d.plane_mut(b, c).iter_mut().for_each(|v| *v = gv);
                    }
                }
                acc(*x, d);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let sx = val(*x).shape();
                let mut d = Tensor4::zeros(sx);
                for b in 0..sx[0] {
                    for c in 0..sx[1] {
                        let k = b * sx[1] + c;
                        d.plane_mut(b, c)[argmax[k]] += g.data()[k];
                    }
                }
                acc(*x, d);
            }
            Op::ChannelMean(x) => {
                let sx = val(*x).shape();
                let mut d = Tensor4::zeros(sx);
                for b in 0..sx[0] {
                    let gp = g.plane(b, 0);
                    for c in 0..sx[1] {
                        for (dv, gv) in d.plane_mut(b, c).iter_mut().zip(gp) {
                            *dv = gv / sx[1] as f64;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::ChannelMax { x, argmax } => {
                let sx = val(*x).shape();
                let hw = sx[2] * sx[3];
                let mut d = Tensor4::zeros(sx);
                for b in 0..sx[0] {
                    let gp = g.plane(b, 0).to_vec();
                    let item = d.item_mut(b);
                    for p in 0..hw {
                        item[argmax[b * hw + p] * hw + p] += gp[p];
                    }
                }
                acc(*x, d);
            }
            Op::Mean(x) => {
                let sx = val(*x).shape();
                let n: usize = sx.iter().product();
                acc(*x, Tensor4::filled(sx, g.data()[0] / n as f64));
            }
            Op::Sum(x) => {
                let sx = val(*x).shape();
                acc(*x, Tensor4::filled(sx, g.data()[0]));
            }
            Op::Blur { x, kernel } => {
                let [bn, c, h, w] = g.shape();
                let mut d = Tensor4::zeros(g.shape());
                for b in 0..bn {
                    for ch in 0..c {
                        blur_plane(g.plane(b, ch), h, w, kernel, d.plane_mut(b, ch));
                    }
                }
                acc(*x, d);
            }
            Op::LstmGates { z, c_prev, peep, acts } => {
                let [bn, c, h, w] = val(*c_prev).shape();
                let hw = h * w;
                let n = c * hw;
                let cp = val(*c_prev).data();
                let [pi, pf, po] = peep.map(|p| val(p).data());
                let gd = g.data();
                let mut dz = vec![0.0; 4 * bn * n];
                let mut dcp = vec![0.0; bn * n];
                let mut dpeep = [vec![0.0; c], vec![0.0; c], vec![0.0; c]];
                for b in 0..bn {
                    for ch in 0..c {
                        for k in ch * hw..(ch + 1) * hw {
                            let e = b * n + k;
                            let [i, f, cand, o, tc] = acts[5 * e..5 * e + 5].try_into().unwrap();
                            let cell = out.data()[2 * b * n + n + k];
                            let dh = gd[2 * b * n + k];
                            let d_o = dh * tc * o * (1.0 - o);
                            let dc = gd[2 * b * n + n + k] + dh * o * (1.0 - tc * tc) + d_o * po[ch];
                            let d_i = dc * cand * i * (1.0 - i);
                            let d_f = dc * cp[e] * f * (1.0 - f);
                            let zb = &mut dz[4 * b * n..4 * (b + 1) * n];
                            zb[k] = d_i;
                            zb[n + k] = d_f;
                            zb[2 * n + k] = dc * i * (1.0 - cand * cand);
                            zb[3 * n + k] = d_o;
                            dcp[e] = dc * f + d_i * pi[ch] + d_f * pf[ch];
                            dpeep[0][ch] += d_i * cp[e];
                            dpeep[1][ch] += d_f * cp[e];
                            dpeep[2][ch] += d_o * cell;
                        }
                    }
                }
                acc(*z, Tensor4::from_vec([bn, 4 * c, h, w], dz).unwrap());
                acc(*c_prev, Tensor4::from_vec([bn, c, h, w], dcp).unwrap());
                for (&p, d) in peep.iter().zip(dpeep) {
                    acc(p, Tensor4::from_vec([1, c, 1, 1], d).unwrap());
                }
            }
        }
    }
}

/// Direct convolution beats unfold + gemm when few output channels share
/// each unfolded patch.
fn use_direct(geom: &PatchGeometry, c_out: usize) -> bool {
    geom.stride == 1 && !geom.is_pointwise() && c_out <= DIRECT_MAX_COUT
}

const DIRECT_MAX_COUT: usize = 8;

/// `tanh` through a single `exp`; libm's `tanh` is about three times slower
/// and the LSTM gates call it on every pixel.
pub fn tanh(v: f64) -> f64 {
    let t = 1.0 - 2.0 / ((2.0 * v.abs()).exp() + 1.0);
    t.copysign(v)
}

pub fn sigmoid(v: f64) -> f64 {
    let e = (-v.abs()).exp();
    let s = 1.0 / (1.0 + e);
    if v >= 0.0 {
        s
    } else {
        e * s
    }
}

fn zip_map(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data).expect("same shape")
}

fn add_channel_bias(out: &mut Tensor4, bias: &[f64]) {
    let [bn, c, _, _] = out.shape();
    for b in 0..bn {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            out.plane_mut(b, ch).iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums(g: &Tensor4) -> Tensor4 {
    let [bn, c, _, _] = g.shape();
    let mut sums = vec![0.0; c];
    for b in 0..bn {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += g.plane(b, ch).iter().sum::<f64>();
        }
    }
    Tensor4::from_vec([1, c, 1, 1], sums).unwrap()
}
