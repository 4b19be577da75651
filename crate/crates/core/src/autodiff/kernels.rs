//! Raw numeric kernels behind the graph ops.

/// Geometry shared by im2col/col2im: a `channels x img_h x img_w` image and
/// a `cols_h x cols_w` grid of kernel placements.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchGeometry {
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cols_h: usize,
    pub cols_w: usize,
}

impl PatchGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.cols_h * self.cols_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0 && self.cols_h == self.img_h && self.cols_w == self.img_w
    }
}

/// Range of output columns `ox` whose source column `ox + off` lies in
/// `0..img_w` (stride 1).
fn valid_span(off: isize, img_w: usize, cols_w: usize) -> (usize, usize) {
    let lo = (-off).clamp(0, cols_w as isize) as usize;
    let hi = (img_w as isize - off).clamp(lo as isize, cols_w as isize) as usize;
    (lo, hi)
}

/// Stride-1 convolution on zero-padded planes. Output rows are computed at
/// the padded width `wp`, so every kernel tap is a single contiguous
/// axpy (or dot product) over `cols_h * wp` values; the `wp - cols_w`
/// extra columns per row are scratch and discarded.
struct Padded {
    wp: usize,
    /// Length of one padded plane, including `k - 1` trailing zeros so the
    /// last tap's slice stays in bounds.
    plane: usize,
    /// Length of one padded-width output plane.
    len: usize,
}

impl Padded {
    fn new(g: &PatchGeometry) -> Self {
        debug_assert_eq!(g.stride, 1);
        let wp = g.img_w + 2 * g.pad;
        let hp = g.img_h + 2 * g.pad;
        Self {
            wp,
            plane: hp * wp + g.kernel - 1,
            len: g.cols_h * wp,
        }
    }

    fn tap(&self, t: usize, k: usize) -> usize {
        (t / k) * self.wp + t % k
    }

    fn pad_image(&self, img: &[f64], g: &PatchGeometry) -> Vec<f64> {
        let mut out = vec![0.0; g.channels * self.plane];
        for (src, dst) in img.chunks_exact(g.img_h * g.img_w).zip(out.chunks_exact_mut(self.plane)) {
            for (y, row) in src.chunks_exact(g.img_w).enumerate() {
                let at = (y + g.pad) * self.wp + g.pad;
                dst[at..at + g.img_w].copy_from_slice(row);
            }
        }
        out
    }

    /// Output-shaped planes spread to the padded width (zero scratch columns).
    fn spread(&self, grad: &[f64], g: &PatchGeometry) -> Vec<f64> {
        let npos = g.positions();
        let mut out = vec![0.0; grad.len() / npos * self.len];
        for (src, dst) in grad.chunks_exact(npos).zip(out.chunks_exact_mut(self.len)) {
            for (src_row, dst_row) in src.chunks_exact(g.cols_w).zip(dst.chunks_exact_mut(self.wp)) {
                dst_row[..g.cols_w].copy_from_slice(src_row);
            }
        }
        out
    }
}

/// Output values per row block in the direct kernels; small enough that a
/// block and the input rows it reads stay in L1.
const BLOCK_VALUES: usize = 512;

/// Row ranges, in padded-width values, covering one output plane.
fn row_blocks(p: &Padded, g: &PatchGeometry) -> impl Iterator<Item = (usize, usize)> {
    let rows = (BLOCK_VALUES / p.wp).max(1);
    let (wp, h) = (p.wp, g.cols_h);
    (0..h).step_by(rows).map(move |r| (r * wp, (r + rows).min(h) * wp))
}

/// Stride-1 convolution without unfolding: `out = w * img` where `w` is
/// `(C_out, C_in, k, k)` and `out` holds `C_out` planes (overwritten).
/// Cheaper than [`im2col`] + gemm when `C_out` is small.
pub(crate) fn conv_direct(img: &[f64], w: &[f64], g: &PatchGeometry, out: &mut [f64]) {
    let p = Padded::new(g);
    let (k, kk) = (g.kernel, g.kernel * g.kernel);
    let src = p.pad_image(img, g);
    let mut acc = vec![0.0; p.len];
    for (co, dst) in out.chunks_exact_mut(g.positions()).enumerate() {
        for (lo, hi) in row_blocks(&p, g) {
            let acc = &mut acc[lo..hi];
            acc.fill(0.0);
            for (ci, plane) in src.chunks_exact(p.plane).enumerate() {
                for (t, &wv) in w[(co * g.channels + ci) * kk..][..kk].iter().enumerate() {
                    let x = &plane[p.tap(t, k) + lo..][..hi - lo];
                    acc.iter_mut().zip(x).for_each(|(a, &x)| *a += wv * x);
                }
            }
        }
        for (row, acc_row) in dst.chunks_exact_mut(g.cols_w).zip(acc.chunks_exact(p.wp)) {
            row.copy_from_slice(&acc_row[..g.cols_w]);
        }
    }
}

/// Input gradient of [`conv_direct`], accumulated into `dimg`.
pub(crate) fn conv_direct_dx(grad: &[f64], w: &[f64], g: &PatchGeometry, dimg: &mut [f64]) {
    let p = Padded::new(g);
    let (k, kk) = (g.kernel, g.kernel * g.kernel);
    let gp = p.spread(grad, g);
    let mut dp = vec![0.0; g.channels * p.plane];
    for (ci, plane) in dp.chunks_exact_mut(p.plane).enumerate() {
        for (lo, hi) in row_blocks(&p, g) {
            for (co, gplane) in gp.chunks_exact(p.len).enumerate() {
                let gv = &gplane[lo..hi];
                for (t, &wv) in w[(co * g.channels + ci) * kk..][..kk].iter().enumerate() {
                    let d = &mut plane[p.tap(t, k) + lo..][..hi - lo];
                    d.iter_mut().zip(gv).for_each(|(d, &gv)| *d += wv * gv);
                }
            }
        }
    }
    for (src, dst) in dp.chunks_exact(p.plane).zip(dimg.chunks_exact_mut(g.img_h * g.img_w)) {
        for (y, row) in dst.chunks_exact_mut(g.img_w).enumerate() {
            let at = (y + g.pad) * p.wp + g.pad;
            row.iter_mut().zip(&src[at..at + g.img_w]).for_each(|(d, &v)| *d += v);
        }
    }
}

/// Weight gradient of [`conv_direct`], accumulated into `dw`.
pub(crate) fn conv_direct_dw(grad: &[f64], img: &[f64], g: &PatchGeometry, dw: &mut [f64]) {
    let p = Padded::new(g);
    let (k, kk) = (g.kernel, g.kernel * g.kernel);
    let gp = p.spread(grad, g);
    let src = p.pad_image(img, g);
    for (lo, hi) in row_blocks(&p, g) {
        for (co, gplane) in gp.chunks_exact(p.len).enumerate() {
            let gv = &gplane[lo..hi];
            for (ci, plane) in src.chunks_exact(p.plane).enumerate() {
                for (t, d) in dw[(co * g.channels + ci) * kk..][..kk].iter_mut().enumerate() {
                    *d += dot(gv, &plane[p.tap(t, k) + lo..][..hi - lo]);
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Unfolds `img` into a `(C*k*k) x (cols_h*cols_w)` matrix (zero padding).
pub(crate) fn im2col(img: &[f64], g: &PatchGeometry, cols: &mut [f64]) {
    let k = g.kernel;
    let npos = g.positions();
    for c in 0..g.channels {
        let plane = &img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                let off = kx as isize - g.pad as isize;
                for oy in 0..g.cols_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.cols_w..(oy + 1) * g.cols_w];
                    if iy < 0 || iy >= g.img_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.img_w..(iy as usize + 1) * g.img_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(off, g.img_w, g.cols_w);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        line[lo..hi].copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            *v = if ix >= 0 && ix < g.img_w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `img`.
pub(crate) fn col2im(cols: &[f64], g: &PatchGeometry, img: &mut [f64]) {
    let k = g.kernel;
    let npos = g.positions();
    for c in 0..g.channels {
        let plane = &mut img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                let off = kx as isize - g.pad as isize;
                for oy in 0..g.cols_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.img_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.img_w..(iy as usize + 1) * g.img_w];
                    let line = &src[oy * g.cols_w..(oy + 1) * g.cols_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(off, g.img_w, g.cols_w);
                        let d = &mut dst[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (a, b) in d.iter_mut().zip(&line[lo..hi]) {
                            *a += b;
                        }
                    } else {
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            if ix >= 0 && ix < g.img_w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix view: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a * b` with `c` row-major `(a.rows x b.cols)`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices cover the strided extents asserted above and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Interpolation mode for [`resize_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Bilinear,
    Bicubic,
}

fn cubic(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Dense `n_out x n_in` 1-D resampling matrix on the pixel-centre grid
/// with clamped borders. Rows sum to one.
pub(crate) fn resize_matrix(n_in: usize, n_out: usize, mode: Interp) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    let clamp = |i: isize| i.clamp(0, n_in as isize - 1) as usize;
    for o in 0..n_out {
        let x = (o as f64 + 0.5) * scale - 0.5;
        let row = &mut m[o * n_in..(o + 1) * n_in];
        match mode {
            Interp::Bilinear => {
                let x = x.max(0.0);
                let x0 = x.floor() as isize;
                let f = x - x0 as f64;
                row[clamp(x0)] += 1.0 - f;
                row[clamp(x0 + 1)] += f;
            }
            Interp::Bicubic => {
                let x0 = x.floor() as isize;
                let f = x - x0 as f64;
                for j in -1..=2isize {
                    row[clamp(x0 + j)] += cubic(f - j as f64);
                }
            }
        }
    }
    m
}

/// Separable zero-padded correlation of one plane with a symmetric 1-D kernel.
pub(crate) fn blur_plane(src: &[f64], h: usize, w: usize, kernel: &[f64], dst: &mut [f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && xx < w as isize {
                    acc += k * line[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && yy < h as isize {
                    acc += k * tmp[yy as usize * w + x];
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_rows_sum_to_one() {
        for mode in [Interp::Bilinear, Interp::Bicubic] {
            for (a, b) in [(4, 8), (8, 4), (5, 5), (3, 12)] {
                let m = resize_matrix(a, b, mode);
                for row in m.chunks(a) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        // Same size is the identity for both modes.
        for mode in [Interp::Bilinear, Interp::Bicubic] {
            let m = resize_matrix(4, 4, mode);
            for i in 0..4 {
                for j in 0..4 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((m[i * 4 + j] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for (k, stride, pad, h, w) in [(3, 1, 1, 5, 6), (3, 2, 0, 7, 6), (5, 1, 2, 4, 4), (2, 2, 0, 6, 4), (3, 2, 1, 5, 5)] {
            let g = PatchGeometry {
                channels: 2,
                img_h: h,
                img_w: w,
                kernel: k,
                stride,
                pad,
                cols_h: (h + 2 * pad - k) / stride + 1,
                cols_w: (w + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..g.rows() * g.positions()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut cols = vec![f64::NAN; y.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5],[6]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 1), 0.0, &mut c);
        assert_eq!(c, [17.0, 39.0]);
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 1), 0.0, &mut c);
        assert_eq!(c, [23.0, 34.0]);
    }

    #[test]
    fn direct_conv_matches_unfolded_gemm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (ci, co, k, pad, h, w) in [(2, 3, 3, 1, 5, 7), (1, 2, 7, 3, 6, 4), (3, 1, 5, 0, 8, 6), (2, 2, 3, 0, 3, 3)] {
            let g = PatchGeometry {
                channels: ci,
                img_h: h,
                img_w: w,
                kernel: k,
                stride: 1,
                pad,
                cols_h: h + 2 * pad - k + 1,
                cols_w: w + 2 * pad - k + 1,
            };
            let mut rand_vec = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let x = rand_vec(ci * h * w);
            let wt = rand_vec(co * g.rows());
            let gy = rand_vec(co * g.positions());
            let mut cols = vec![0.0; g.rows() * g.positions()];
            im2col(&x, &g, &mut cols);

            let mut want = vec![0.0; co * g.positions()];
            gemm(Mat::new(&wt, co, g.rows()), Mat::new(&cols, g.rows(), g.positions()), 0.0, &mut want);
            let mut got = vec![f64::NAN; want.len()];
            conv_direct(&x, &wt, &g, &mut got);

            let mut want_dw = vec![0.0; wt.len()];
            gemm(Mat::new(&gy, co, g.positions()), Mat::new(&cols, g.rows(), g.positions()).t(), 0.0, &mut want_dw);
            let mut got_dw = vec![0.0; wt.len()];
            conv_direct_dw(&gy, &x, &g, &mut got_dw);

            let mut gcols = vec![0.0; cols.len()];
            gemm(Mat::new(&wt, co, g.rows()).t(), Mat::new(&gy, co, g.positions()), 0.0, &mut gcols);
            let mut want_dx = vec![0.0; x.len()];
            col2im(&gcols, &g, &mut want_dx);
            let mut got_dx = vec![0.0; x.len()];
            conv_direct_dx(&gy, &wt, &g, &mut got_dx);

            for (a, b) in want.iter().chain(&want_dw).chain(&want_dx).zip(got.iter().chain(&got_dw).chain(&got_dx)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for k={k} pad={pad}");
            }
        }
    }
}
