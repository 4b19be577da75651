use crowdcast::autodiff::{ConvLstmCell, Graph, Padding, ParamStore, Tensor4};
use crowdcast::flow::warp_density;
use crowdcast::forecaster::{D2dConfig, Model, ModelConfig, SampleWindow, Structure};
use crowdcast::grid::{decode_grid, encode_grid, GridFormat};
use crowdcast::metrics::evaluate_maps;
use crowdcast::simulator::{self, corridor_scene, Agent, SimConfig, Vec2};
use crowdcast::synth::{adaptive_sigmas, synth_density, KernelConfig};
use crowdcast::{DensityMap, FlowField, Frame, Grid2D};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_strategy(max_side: usize, lo: f64, hi: f64) -> impl Strategy<Value = Grid2D> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        prop::collection::vec(lo..hi, h * w).prop_map(move |v| Grid2D::new(h, w, v).unwrap())
    })
}

fn heads_strategy(max: usize, side: f64) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..side, 0.0..side), 0..max)
}

fn tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
    Tensor4::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn text_grid_round_trip_is_lossless(g in grid_strategy(9, -1e6, 1e6)) {
        let back = decode_grid(&encode_grid(&g, GridFormat::Text).unwrap(), GridFormat::Text).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn binary_grid_round_trip_is_idempotent(g in grid_strategy(9, -1e6, 1e6)) {
        let once = decode_grid(&encode_grid(&g, GridFormat::Binary).unwrap(), GridFormat::Binary).unwrap();
        let twice = decode_grid(&encode_grid(&once, GridFormat::Binary).unwrap(), GridFormat::Binary).unwrap();
        prop_assert_eq!(&once, &twice);
        for (a, b) in g.values().iter().zip(once.values()) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-30));
        }
    }

    #[test]
    fn patches_partition_the_grid(side in 1usize..5, tiles in 1usize..4, seed in 0u64..1000) {
        let n = side * tiles;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid2D::from_fn(n, n, |_, _| rand::Rng::random_range(&mut rng, 0.0..10.0)).unwrap();
        let k = tiles * tiles;
        let patches = g.partition_patches(k).unwrap();
        prop_assert_eq!(patches.len(), k);
        let mut all: Vec<f64> = patches.iter().flat_map(|p| p.values().to_vec()).collect();
        let mut src = g.values().to_vec();
        all.sort_by(f64::total_cmp);
        src.sort_by(f64::total_cmp);
        prop_assert_eq!(all, src);
        let total: f64 = g.patch_sums(k).unwrap().iter().sum();
        prop_assert!((total - g.sum()).abs() <= 1e-9 * g.sum().abs().max(1.0));
    }

    #[test]
    fn resize_keeps_constants_and_range(g in grid_strategy(8, -5.0, 5.0), c in -3.0f64..3.0, h in 1usize..12, w in 1usize..12) {
        let flat = Grid2D::filled(g.height(), g.width(), c).resize_bilinear(h, w).unwrap();
        prop_assert!(flat.values().iter().all(|&v| v == c));
        let r = g.resize_bilinear(h, w).unwrap();
        prop_assert!(r.min() >= g.min() - 1e-12 && r.max() <= g.max() + 1e-12);
    }

    #[test]
    fn step_respects_speed_cap(seed in 0u64..500, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |lo: f64, hi: f64| rand::Rng::random_range(&mut rng, lo..hi);
        let agents: Vec<Agent> = (0..n)
            .map(|id| Agent {
                id: id as u64,
                position: Vec2::new(r(0.0, 6.0), r(0.0, 6.0)),
                velocity: Vec2::new(r(-3.0, 3.0), r(-3.0, 3.0)),
                desired_speed: r(0.5, 2.5),
                goal: Vec2::new(r(0.0, 6.0), r(0.0, 6.0)),
                radius: 0.25,
            })
            .collect();
        let cfg = SimConfig::default();
        let next = simulator::step(&agents, &[], &cfg);
        for a in &next {
            prop_assert!(a.velocity.norm() <= cfg.speed_cap_factor * a.desired_speed + 1e-12);
        }
    }

    #[test]
    fn density_sum_equals_head_count(heads in heads_strategy(60, 24.0)) {
        let d = synth_density(&heads, 24, 24, &KernelConfig::default()).unwrap();
        let n = heads.len() as f64;
        prop_assert!((d.count() - n).abs() <= 1e-6 * n.max(1.0));
        prop_assert!(d.grid().values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn density_is_translation_equivariant(heads in prop::collection::vec((14.0f64..18.0, 14.0f64..18.0), 1..6), dx in -3i32..4, dy in -3i32..4) {
        // Fixed spread keeps every support well inside the 32x32 image.
        let cfg = KernelConfig { sigma_fallback: 1.5, knn: 8, ..KernelConfig::default() };
        let shifted: Vec<_> = heads.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect();
        let a = synth_density(&heads, 32, 32, &cfg).unwrap();
        let b = synth_density(&shifted, 32, 32, &cfg).unwrap();
        for r in 0..32i32 {
            for c in 0..32i32 {
                let (sr, sc) = (r - dy, c - dx);
                let want = if (0..32).contains(&sr) && (0..32).contains(&sc) { a.grid().get(sr as usize, sc as usize) } else { 0.0 };
                prop_assert!((b.grid().get(r as usize, c as usize) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmas_scale_with_distances(heads in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 5..20), lambda in 0.1f64..5.0) {
        let cfg = KernelConfig::default();
        let scaled: Vec<_> = heads.iter().map(|&(x, y)| (x * lambda, y * lambda)).collect();
        for (a, b) in adaptive_sigmas(&heads, &cfg).iter().zip(adaptive_sigmas(&scaled, &cfg)) {
            prop_assert!((a * lambda - b).abs() <= 1e-9 * b.abs().max(1e-9));
        }
    }

    #[test]
    fn interior_warp_conserves_mass(seed in 0u64..1000, amp in 0.0f64..2.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |lo: f64, hi: f64| rand::Rng::random_range(&mut rng, lo..hi);
        let n = 16;
        // Mass only at least 4 px from the border; displacements stay below 3 px.
        let d = Grid2D::from_fn(n, n, |y, x| if (4..12).contains(&y) && (4..12).contains(&x) { r(0.0, 2.0) } else { 0.0 }).unwrap();
        let u = Grid2D::from_fn(n, n, |_, _| r(-amp, amp)).unwrap();
        let v = Grid2D::from_fn(n, n, |_, _| r(-amp, amp)).unwrap();
        let d = DensityMap::new(d).unwrap();
        let out = warp_density(&d, &FlowField::new(u, v).unwrap()).unwrap();
        prop_assert!((out.count() - d.count()).abs() <= 1e-9 * d.count());
        prop_assert!(out.grid().values().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn metrics_are_permutation_invariant_and_homogeneous(seed in 0u64..1000, lambda in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = || DensityMap::new(Grid2D::from_fn(8, 8, |_, _| rand::Rng::random_range(&mut rng, 0.0..1.0)).unwrap()).unwrap();
        let preds: Vec<_> = (0..4).map(|_| map()).collect();
        let gts: Vec<_> = (0..4).map(|_| map()).collect();
        let ks = [1, 4, 16];
        let base = evaluate_maps(&preds, &gts, &ks).unwrap();

        let rev = |v: &[DensityMap]| v.iter().rev().cloned().collect::<Vec<_>>();
        let permuted = evaluate_maps(&rev(&preds), &rev(&gts), &ks).unwrap();
        let scale = |v: &[DensityMap]| v.iter().map(|m| DensityMap::new(m.grid().map(|x| x * lambda).unwrap()).unwrap()).collect::<Vec<_>>();
        let scaled = evaluate_maps(&scale(&preds), &scale(&gts), &ks).unwrap();
        for ((b, p), s) in base.results.iter().zip(&permuted.results).zip(&scaled.results) {
            prop_assert!((b.pmae - p.pmae).abs() <= 1e-12 * b.pmae.max(1.0));
            prop_assert!((b.pmse - p.pmse).abs() <= 1e-12 * b.pmse.max(1.0));
            prop_assert!((b.pmae * lambda - s.pmae).abs() <= 1e-9 * s.pmae.max(1e-9));
            prop_assert!((b.pmse * lambda * lambda - s.pmse).abs() <= 1e-9 * s.pmse.max(1e-9));
        }
        let single = evaluate_maps(&preds[..1], &gts[..1], &[1]).unwrap();
        prop_assert!((single.results[0].pmae - (preds[0].count() - gts[0].count()).abs()).abs() < 1e-12);
    }

    #[test]
    fn narrow_and_wide_convolutions_agree(ci in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), seed in 0u64..1000) {
        // A two-output convolution must equal the first two channels of a
        // twelve-output one sharing those filters (different kernels run them).
        let x = tensor([2, ci, 7, 6], seed);
        let wide = tensor([12, ci, k, k], seed + 1);
        let narrow = Tensor4::from_vec([2, ci, k, k], wide.data()[..2 * ci * k * k].to_vec()).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let wv = g.constant(wide);
        let nv = g.constant(narrow);
        let a = g.conv2d(xv, wv, None, 1, Padding::Same).unwrap();
        let b = g.conv2d(xv, nv, None, 1, Padding::Same).unwrap();
        let (a, b) = (g.value(a), g.value(b));
        for bi in 0..2 {
            for ch in 0..2 {
                for (p, q) in a.plane(bi, ch).iter().zip(b.plane(bi, ch)) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn convlstm_keeps_shape_over_any_length(steps in 1usize..6, h in 2usize..7, w in 2usize..7, seed in 0u64..100) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = ConvLstmCell::new(&mut store, "cell", 2, 3, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut state = None;
        for t in 0..steps {
            let x = g.input(tensor([1, 2, h, w], seed + t as u64));
            let s = cell.step(&mut g, &store, x, state).unwrap();
            prop_assert_eq!(g.shape(s.h), [1, 3, h, w]);
            prop_assert_eq!(g.shape(s.c), [1, 3, h, w]);
            prop_assert!(g.value(s.h).all_finite() && g.value(s.c).all_finite());
            state = Some(s);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn predict_returns_resolution_sized_nonnegative_maps(
        frames in 2usize..4,
        res in prop::sample::select(vec![16usize, 32]),
        structure in prop::sample::select(vec![Structure::F2dOnly, Structure::D2dOnly, Structure::Joint]),
        flow in any::<bool>(),
        seed in 0u64..100,
    ) {
        let cfg = ModelConfig {
            frames,
            resolution: res,
            structure,
            use_flow_residual: flow,
            init_seed: seed,
            d2d: D2dConfig { pool_stages: 2, ..D2dConfig::default() },
            ..ModelConfig::compact()
        };
        let mut model = Model::new(cfg).unwrap();
        // Random head weights so the residual path is not trivially zero.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in model.head_ids() {
            let shape = model.params().value(id).shape();
            *model.params_mut().value_mut(id) = Tensor4::uniform(shape, 0.5, &mut rng);
        }
        let map = |s: u64| DensityMap::new(Grid2D::from_fn(res, res, |r, c| ((r * 7 + c * 3 + s as usize) % 5) as f64 * 0.01).unwrap()).unwrap();
        let frame = |s: u64| Frame::new(Grid2D::from_fn(res, res, |r, c| ((r + c + s as usize) % 9) as f64 / 9.0).unwrap()).unwrap();
        let window = SampleWindow {
            frames: (0..frames as u64).map(frame).collect(),
            densities: (0..frames as u64).map(map).collect(),
            target: None,
            flow_warped: flow.then(|| map(9)),
        };
        let pred = model.predict(&window).unwrap();
        prop_assert_eq!(pred.dims(), (res, res));
        prop_assert!(pred.grid().values().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let scene = corridor_scene(32);
    let a = simulator::run(&scene, 5, 6.0).unwrap();
    let b = simulator::run(&scene, 5, 6.0).unwrap();
    assert_eq!(a, b);
    let c = simulator::run(&scene, 6, 6.0).unwrap();
    assert_ne!(a, c);
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", tensor([3, 2, 3, 3], 1)).unwrap();
    let mut g = Graph::new();
    let x = g.input(tensor([1, 2, 5, 5], 2));
    let wv = g.param(&store, w);
    let y = g.conv2d(x, wv, None, 1, Padding::Same).unwrap();
    let y = g.tanh(y);
    let l = g.sum(y);
    g.backward(l, &mut store);
    let once_w = store.grad(w).clone();
    let once_x = g.grad(x).unwrap().clone();
    g.backward(l, &mut store);
    for (a, b) in once_w.data().iter().zip(store.grad(w).data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
    for (a, b) in once_x.data().iter().zip(g.grad(x).unwrap().data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}
