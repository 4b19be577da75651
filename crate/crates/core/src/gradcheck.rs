//! Central finite-difference checks of the analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::layers::mse;
use crate::autodiff::{ssim, Cbam, ConvLstmCell, Graph, Interp, LstmState, ParamStore, Padding, Tensor4, Var};
use crate::error::Result;
use crate::forecaster::{self, D2dConfig, Model, ModelConfig, SampleWindow};
use crate::grid::{DensityMap, Frame};
use crate::synth::smooth_texture;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Entries whose relative error is below this pass.
    pub tolerance: f64,
    /// Fraction of entries (inputs and parameters) to check; at least
    /// `min_entries` are checked when available.
    pub fraction: f64,
    pub min_entries: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            fraction: 1.0,
            min_entries: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Denominator floor: gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks `build`, which maps input vars to an output var, by reducing the
/// output with fixed random weights and comparing the analytic gradient of
/// that scalar against central differences, for every input tensor and
/// every parameter in `store`.
pub fn check<F>(name: &str, store: &mut ParamStore, inputs: &[Tensor4], seed: u64, opts: &CheckOptions, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |store: &ParamStore, inputs: &[Tensor4]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, store, &vars)?;
        Ok((g, vars, out))
    };
    let reduce = |g: &mut Graph, out: Var, w: &Tensor4| -> Result<Var> {
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        Ok(g.sum(prod))
    };

    store.zero_grads();
    let (mut g, vars, out) = run(store, inputs)?;
    let weights = Tensor4::uniform(g.shape(out), 1.0, &mut rng);
    let s = reduce(&mut g, out, &weights)?;
    g.backward(s, store);
    let input_grads: Vec<Tensor4> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor4::zeros(t.shape())))
        .collect();
    drop(g);
    let eval = |store: &ParamStore, inputs: &[Tensor4]| -> Result<f64> {
        let (mut g, _, out) = run(store, inputs)?;
        let s = reduce(&mut g, out, &weights)?;
        Ok(g.value(s).data()[0])
    };

    // Entry pool: (tensor index, element). Inputs first, then parameters.
    let param_ids: Vec<_> = store.ids().collect();
    let sizes: Vec<usize> = inputs
        .iter()
        .map(Tensor4::len)
        .chain(param_ids.iter().map(|&id| store.value(id).len()))
        .collect();
    let total: usize = sizes.iter().sum();
    let wanted = ((total as f64 * opts.fraction).ceil() as usize).max(opts.min_entries).min(total);
    let mut picks = sample(&mut rng, total, wanted).into_vec();
    picks.sort_unstable();

    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        passed: 0,
        max_rel_err: 0.0,
    };
    let mut inputs = inputs.to_vec();
    for flat in picks {
        let (mut t, mut e) = (0, flat);
        while e >= sizes[t] {
            e -= sizes[t];
            t += 1;
        }
        let h = opts.step;
        let (analytic, numeric) = if t < inputs.len() {
            let orig = inputs[t].data()[e];
            inputs[t].data_mut()[e] = orig + h;
            let fp = eval(store, &inputs)?;
            inputs[t].data_mut()[e] = orig - h;
            let fm = eval(store, &inputs)?;
            inputs[t].data_mut()[e] = orig;
            (input_grads[t].data()[e], (fp - fm) / (2.0 * h))
        } else {
            let id = param_ids[t - inputs.len()];
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + h;
            let fp = eval(store, &inputs)?;
            store.value_mut(id).data_mut()[e] = orig - h;
            let fm = eval(store, &inputs)?;
            store.value_mut(id).data_mut()[e] = orig;
            (store.grad(id).data()[e], (fp - fm) / (2.0 * h))
        };
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        if err < opts.tolerance {
            report.passed += 1;
        }
        report.max_rel_err = report.max_rel_err.max(err);
    }
    store.zero_grads();
    Ok(report)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    Tensor4::uniform(shape, 1.0, rng)
}

/// Tensor with entries in `[lo, hi]`.
fn rand_range(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(lo..=hi)).collect()).unwrap()
}

/// Input for max-type ops: a shuffled, well-separated grid of values so
/// that no perturbation of size `h` changes an argmax.
fn separated(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor4::from_vec(shape, v).unwrap()
}

fn small_window(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SampleWindow {
    let r = cfg.resolution;
    let mut seed = || rng.random::<u64>();
    let frame = |s| Frame::new(smooth_texture(r, r, 2.0, s, 0.1, 0.9)).unwrap();
    let density = |s| DensityMap::new(smooth_texture(r, r, 2.0, s, 0.001, 0.05)).unwrap();
    SampleWindow {
        frames: (0..cfg.frames).map(|_| frame(seed())).collect(),
        densities: (0..cfg.frames).map(|_| density(seed())).collect(),
        target: Some(density(seed())),
        flow_warped: Some(density(seed())),
    }
}

/// The full suite: every differentiable op on small random shapes plus the
/// joint model at 16x16 with N = 2.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOptions::default();
    let mut reports = Vec::new();
    let mut no_params = ParamStore::new();

    macro_rules! op {
        ($name:expr, [$($shape:expr),*], |$g:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$(rand_t(&mut rng, $shape)),*];
            let s = rng.random();
            reports.push(check($name, &mut no_params, &inputs, s, &opts, |$g, _, $v| $body)?);
        }};
    }

    // Convolutions: weights passed as inputs so both gradients are checked.
    op!("conv2d same", [[2, 3, 5, 6], [4, 3, 3, 3], [1, 4, 1, 1]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same));
    op!("conv2d valid stride 2", [[1, 2, 7, 6], [3, 2, 3, 3], [1, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Valid));
    op!("conv2d 1x1", [[2, 3, 4, 4], [2, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], None, 1, Padding::Same));
    op!("conv_transpose2d stride 2", [[2, 3, 3, 4], [3, 2, 2, 2], [1, 2, 1, 1]], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0));
    op!("conv_transpose2d stride 2 pad 1", [[1, 2, 4, 3], [2, 3, 3, 3]], |g, v| g.conv_transpose2d(v[0], v[1], None, 2, 1));
    {
        let inputs = vec![separated(&mut rng, [2, 2, 6, 4])];
        reports.push(check("maxpool2", &mut no_params, &inputs, rng.random(), &opts, |g, _, v| g.maxpool2(v[0]))?);
        let inputs = vec![separated(&mut rng, [2, 3, 3, 4])];
        reports.push(check("global_max_pool", &mut no_params, &inputs, rng.random(), &opts, |g, _, v| Ok(g.global_max_pool(v[0])))?);
        let inputs = vec![separated(&mut rng, [2, 3, 3, 4])];
        reports.push(check("channel_max", &mut no_params, &inputs, rng.random(), &opts, |g, _, v| Ok(g.channel_max(v[0])))?);
    }
    op!("upsample bilinear x2", [[1, 2, 3, 4]], |g, v| g.upsample(v[0], 2, Interp::Bilinear));
    op!("upsample bicubic x2", [[2, 1, 4, 3]], |g, v| g.upsample(v[0], 2, Interp::Bicubic));
    op!("resize bicubic down", [[1, 2, 6, 5]], |g, v| g.resize(v[0], 4, 3, Interp::Bicubic));
    op!("relu", [[2, 2, 3, 3]], |g, v| Ok(g.relu(v[0])));
    op!("sigmoid", [[2, 2, 3, 3]], |g, v| Ok(g.sigmoid(v[0])));
    op!("tanh", [[2, 2, 3, 3]], |g, v| Ok(g.tanh(v[0])));
    op!("affine", [[1, 2, 3, 3]], |g, v| Ok(g.affine(v[0], -1.7, 0.3)));
    op!("add", [[2, 2, 3, 3], [2, 2, 3, 3]], |g, v| g.add(v[0], v[1]));
    op!("sub", [[2, 2, 3, 3], [2, 2, 3, 3]], |g, v| g.sub(v[0], v[1]));
    op!("mul", [[2, 2, 3, 3], [2, 2, 3, 3]], |g, v| g.mul(v[0], v[1]));
    {
        let inputs = vec![rand_t(&mut rng, [2, 2, 3, 3]), rand_range(&mut rng, [2, 2, 3, 3], 0.5, 2.0)];
        reports.push(check("div", &mut no_params, &inputs, rng.random(), &opts, |g, _, v| g.div(v[0], v[1]))?);
    }
    op!("add_broadcast", [[2, 3, 3, 4], [1, 3, 1, 1]], |g, v| g.add_broadcast(v[0], v[1]));
    op!("mul_broadcast channels", [[2, 3, 3, 4], [2, 3, 1, 1]], |g, v| g.mul_broadcast(v[0], v[1]));
    op!("mul_broadcast spatial", [[2, 3, 3, 4], [2, 1, 3, 4]], |g, v| g.mul_broadcast(v[0], v[1]));
    op!("concat", [[2, 1, 3, 3], [2, 2, 3, 3]], |g, v| g.concat(&[v[0], v[1]]));
    op!("slice_channels", [[2, 4, 3, 3]], |g, v| g.slice_channels(v[0], 1, 2));
    op!("global_avg_pool", [[2, 3, 3, 4]], |g, v| Ok(g.global_avg_pool(v[0])));
    op!("channel_mean", [[2, 3, 3, 4]], |g, v| Ok(g.channel_mean(v[0])));
    op!("mean", [[2, 2, 3, 3]], |g, v| Ok(g.mean(v[0])));
    op!("sum", [[2, 2, 3, 3]], |g, v| Ok(g.sum(v[0])));
    op!("blur", [[1, 2, 6, 7]], |g, v| g.blur(v[0], &[0.25, 0.5, 0.25]));
    {
        let inputs = vec![rand_range(&mut rng, [1, 1, 8, 8], 0.0, 0.1), rand_range(&mut rng, [1, 1, 8, 8], 0.0, 0.1)];
        reports.push(check("ssim", &mut no_params, &inputs, rng.random(), &opts, |g, _, v| ssim(g, v[0], v[1], 0.1))?);
        let inputs = vec![rand_t(&mut rng, [1, 2, 4, 5]), rand_t(&mut rng, [1, 2, 4, 5])];
        reports.push(check("mse", &mut no_params, &inputs, rng.random(), &opts, |g, _, v| mse(g, v[0], v[1]))?);
        let inputs = vec![rand_range(&mut rng, [1, 1, 8, 8], 0.0, 0.1), rand_range(&mut rng, [1, 1, 8, 8], 0.0, 0.1)];
        let cfg = forecaster::LossConfig::default();
        reports.push(check("loss", &mut no_params, &inputs, rng.random(), &opts, |g, _, v| forecaster::loss(g, v[0], v[1], &cfg))?);
    }

    {
        // Two chained ConvLSTM steps; random peepholes so every path is live.
        let mut store = ParamStore::new();
        let cell = ConvLstmCell::new(&mut store, "cell", 2, 3, 3, &mut rng)?;
        for id in [cell.peep_i, cell.peep_f, cell.peep_o] {
            *store.value_mut(id) = rand_t(&mut rng, [1, 3, 1, 1]);
        }
        let inputs = vec![
            rand_t(&mut rng, [1, 2, 4, 5]),
            rand_t(&mut rng, [1, 2, 4, 5]),
            rand_t(&mut rng, [1, 3, 4, 5]),
            rand_t(&mut rng, [1, 3, 4, 5]),
        ];
        reports.push(check("convlstm two steps", &mut store, &inputs, rng.random(), &opts, |g, st, v| {
            let s1 = cell.step(g, st, v[0], Some(LstmState { h: v[2], c: v[3] }))?;
            let s2 = cell.step(g, st, v[1], Some(s1))?;
            g.concat(&[s2.h, s2.c])
        })?);
    }
    {
        let mut store = ParamStore::new();
        let cbam = Cbam::new(&mut store, "cbam", 2, 1, 3, &mut rng)?;
        let inputs = vec![separated(&mut rng, [1, 2, 4, 4])];
        reports.push(check("cbam", &mut store, &inputs, rng.random(), &opts, |g, st, v| cbam.forward(g, st, v[0]))?);
    }

    reports.push(joint_model_check(rng.random())?);
    Ok(reports)
}

/// End-to-end loss of the joint model at 16x16, N = 2, over a random 1 %
/// sample of its parameters.
pub fn joint_model_check(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        frames: 2,
        resolution: 16,
        d2d: D2dConfig {
            pool_stages: 2,
            ..D2dConfig::default()
        },
        init_seed: rng.random(),
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg.clone())?;
    // A live head so that gradients reach every stream.
    let head = model.params().id("head.w").expect("head exists");
    let shape = model.params().value(head).shape();
    *model.params_mut().value_mut(head) = Tensor4::uniform(shape, 0.5, &mut rng);
    let window = small_window(&cfg, &mut rng);
    let opts = CheckOptions {
        fraction: 0.01,
        min_entries: 200,
        ..CheckOptions::default()
    };
    let target = window.target.clone().expect("target");
    let mut store = model.params().clone();
    check("joint model loss 16x16 N=2", &mut store, &[], seed, &opts, |g, st, _| {
        let out = model.forward_with(g, st, &window)?;
        let t = g.constant(forecaster::grid_tensor(target.grid(), 1.0));
        forecaster::loss(g, out.prediction, t, &model.config().loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn counts_every_entry() {
        let mut store = ParamStore::new();
        let inputs = vec![Tensor4::from_vec([1, 1, 1, 3], vec![0.3, -0.2, 0.9]).unwrap()];
        let r = check("tanh", &mut store, &inputs, 1, &CheckOptions::default(), |g, _, v| Ok(g.tanh(v[0]))).unwrap();
        assert_eq!(r.checked, 3);
        assert_eq!(r.passed, 3);
    }
}
