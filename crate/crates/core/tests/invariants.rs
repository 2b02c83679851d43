//! Randomized checks of the structural invariants of layers, encoder
//! variants, data, optimizer and metrics.

use predformer::data::{encode_tensor, gen_moving_shapes, read_tensor, AnyTensor, ShapeSpec};
use predformer::metrics::{pixel_metrics, ssim};
use predformer::model::{
    count_params, encoder_forward, estimate_flops, spatial_pass, temporal_pass, ModelConfig,
    PeKind, PredFormer, VariantKind, VariantSpec,
};
use predformer::nn::{
    drop_path, gtb_forward, mhsa, AttentionParams, Ctx, DropSpec, FfnKind, GtbParams, Mode,
    ParamStore, Rng,
};
use predformer::train::{adamw_step, AdamW, OptimizerState, TrainConfig, Trainer};
use predformer::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn eval<P>(store: &ParamStore<f64>, x: &Tensor<f64>, f: P) -> Tensor<f64>
where
    P: Fn(&mut Ctx<'_, f64>, &Var<f64>) -> predformer::Result<Var<f64>>,
{
    let tape = Tape::inference();
    let bound = store.bind(&tape);
    let mut rng = Rng::seed_from_u64(0);
    let mut ctx = Ctx::new(&tape, &bound, Mode::Eval, &mut rng);
    f(&mut ctx, &Var::constant(x.clone())).unwrap().into_value()
}

fn block(seed: u64, dim: usize) -> (ParamStore<f64>, GtbParams) {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = GtbParams::new(
        &mut store,
        &mut rng,
        "b",
        dim,
        2,
        2 * dim,
        FfnKind::SwiGlu,
        1e-5,
    )
    .unwrap();
    jitter(&mut store, seed ^ 99);
    (store, p)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn small_config(
    kind: VariantKind,
    frames: usize,
    gh: usize,
    gw: usize,
    layers: usize,
) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(kind);
    cfg.frames_in = frames;
    cfg.frames_out = frames;
    cfg.height = gh * cfg.patch;
    cfg.width = gw * cfg.patch;
    cfg.variant = VariantSpec::new(
        kind,
        if kind.is_factorized() {
            2 * layers
        } else {
            layers
        },
    );
    cfg
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, PredFormer) {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = PredFormer::new(cfg, &mut store, &mut rng).unwrap();
    jitter(&mut store, seed ^ 5);
    (store, model)
}

fn kind() -> impl Strategy<Value = VariantKind> {
    prop::sample::select(VariantKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attention_and_block_are_token_equivariant(len in 1usize..7, groups in 1usize..3, seed in any::<u64>()) {
        let (store, gtb) = block(seed, 8);
        let mut rng = Rng::seed_from_u64(seed);
        let mut astore = ParamStore::new();
        let attn = AttentionParams::new(&mut astore, &mut rng, "a", 8, 4).unwrap();
        jitter(&mut astore, seed ^ 3);
        let perm = shuffled(len, seed ^ 11);
        let x = rand_tensor(&[groups, len, 8], seed, -1.0, 1.0);
        let px = Tensor::from_fn(x.shape(), |i| {
            let (g, r) = (i / (len * 8), i % (len * 8));
            x.at(&[g, perm[r / 8], r % 8])
        });
        let outs = [
            (eval(&astore, &x, |c, v| mhsa(c, v, &attn, 0.0)), eval(&astore, &px, |c, v| mhsa(c, v, &attn, 0.0))),
            (
                eval(&store, &x, |c, v| gtb_forward(c, v, &gtb, &DropSpec::none(), 0.0)),
                eval(&store, &px, |c, v| gtb_forward(c, v, &gtb, &DropSpec::none(), 0.0)),
            ),
        ];
        for (y, py) in outs {
            for g in 0..groups {
                for t in 0..len {
                    for c in 0..8 {
                        prop_assert!((py.at(&[g, t, c]) - y.at(&[g, perm[t], c])).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn drop_path_preserves_expectation(rate in 0.1f64..0.6, seed in any::<u64>()) {
        let n = 200_000;
        let tape = Tape::<f64>::inference();
        let store = ParamStore::<f64>::new();
        let bound = store.bind(&tape);
        let mut rng = Rng::seed_from_u64(seed);
        let mut ctx = Ctx::new(&tape, &bound, Mode::Train, &mut rng);
        let y = drop_path(&mut ctx, &Var::constant(Tensor::ones(&[n, 1])), rate).unwrap();
        let mean = y.value().sum_f64() / n as f64;
        prop_assert!((mean - 1.0).abs() < 0.02, "rate {rate}: mean {mean}");
    }

    #[test]
    fn every_variant_preserves_grid_shape(k in kind(), t in 1usize..4, gh in 1usize..3, gw in 1usize..3, seed in any::<u64>()) {
        let cfg = small_config(k, t, gh, gw, 1);
        let (store, model) = build(&cfg, seed);
        let x = rand_tensor(&[2, t, gh * gw, cfg.dim], seed, -1.0, 1.0);
        let y = eval(&store, &x, |c, v| encoder_forward(c, v, &model));
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
        let again = eval(&store, &x, |c, v| encoder_forward(c, v, &model));
        prop_assert_eq!(y, again);
    }

    #[test]
    fn passes_are_isolated(t in 2usize..4, n in 2usize..5, t0 in 0usize..4, n0 in 0usize..5, seed in any::<u64>()) {
        let (t0, n0) = (t0 % t, n0 % n);
        let (store, p) = block(seed, 8);
        let x = rand_tensor(&[2, t, n, 8], seed, -1.0, 1.0);
        let mut bumped = x.clone();
        for c in 0..8 {
            bumped.data_mut()[((t + t0) * n + n0) * 8 + c] += 0.1 * (c as f64 + 1.0);
        }
        let none = DropSpec::none();
        let sp = |v: &Tensor<f64>| eval(&store, v, |c, x| spatial_pass(c, x, &p, &none, 0.0));
        let tp = |v: &Tensor<f64>| eval(&store, v, |c, x| temporal_pass(c, x, &p, &none, 0.0));
        let (a, b) = (sp(&x), sp(&bumped));
        let (c, d) = (tp(&x), tp(&bumped));
        for bi in 0..2 {
            for ti in 0..t {
                for ni in 0..n {
                    let idx = [bi, ti, ni, 0];
                    let hit = bi == 1;
                    if !(hit && ti == t0) {
                        prop_assert_eq!(a.at(&idx), b.at(&idx), "spatial leaked to {:?}", idx);
                    }
                    if !(hit && ni == n0) {
                        prop_assert_eq!(c.at(&idx), d.at(&idx), "temporal leaked to {:?}", idx);
                    }
                }
            }
        }
        prop_assert!(a.at(&[1, t0, (n0 + 1) % n, 0]) != b.at(&[1, t0, (n0 + 1) % n, 0]));
        prop_assert!(c.at(&[1, (t0 + 1) % t, n0, 0]) != d.at(&[1, (t0 + 1) % t, n0, 0]));
    }

    #[test]
    fn without_pe_output_follows_patch_permutation(k in kind(), seed in any::<u64>()) {
        let (gh, gw) = (2, 2);
        let mut cfg = small_config(k, 2, gh, gw, 1);
        cfg.pe = PeKind::None;
        let (store, model) = build(&cfg, seed);
        let n = gh * gw;
        let perm = shuffled(n, seed ^ 21);
        let p = cfg.patch;
        let frames = rand_tensor(&cfg.frame_shape(1), seed, 0.0, 1.0);
        let w = cfg.width;
        // pixel (y, x) of patch slot q comes from the same offset in patch perm[q]
        let source = |y: usize, x: usize| -> (usize, usize) {
            let q = (y / p) * gw + x / p;
            let s = perm[q];
            ((s / gw) * p + y % p, (s % gw) * p + x % p)
        };
        let hw = cfg.height * w;
        let moved = Tensor::from_fn(frames.shape(), |i| {
            let (plane, r) = (i / hw, i % hw);
            let (y, x) = source(r / w, r % w);
            frames.data()[plane * hw + y * w + x]
        });
        let y = eval(&store, &frames, |c, v| model.forward(c, v));
        let ym = eval(&store, &moved, |c, v| model.forward(c, v));
        for i in 0..y.numel() {
            let (plane, r) = (i / hw, i % hw);
            let (sy, sx) = source(r / w, r % w);
            prop_assert!((ym.data()[i] - y.data()[plane * hw + sy * w + sx]).abs() <= 1e-5);
        }
    }

    #[test]
    fn param_count_matches_allocation(
        k in kind(),
        layers in 1usize..3,
        dim_heads in prop::sample::select(vec![(8usize, 2usize), (16, 4), (12, 3)]),
        hidden in 4usize..24,
        learnable in any::<bool>(),
        final_norm in any::<bool>(),
        mlp in any::<bool>(),
    ) {
        let mut cfg = small_config(k, 2, 2, 3, layers);
        (cfg.dim, cfg.heads) = dim_heads;
        cfg.hidden = hidden;
        cfg.pe = if learnable { PeKind::Learnable } else { PeKind::SinusoidalAbsolute };
        cfg.final_norm = final_norm;
        cfg.ffn = if mlp { FfnKind::Mlp } else { FfnKind::SwiGlu };
        let mut store = ParamStore::<f32>::new();
        PredFormer::new(&cfg, &mut store, &mut Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(count_params(&cfg), store.numel());
    }

    #[test]
    fn full_minus_factorized_flops(t in 2u64..12, gh in 1usize..5, gw in 2usize..5, half in 1usize..6, dim_mult in 1usize..5) {
        let blocks = 2 * half;
        let mut cfg = ModelConfig::tiny(VariantKind::FullAttention);
        cfg.frames_in = t as usize;
        cfg.frames_out = t as usize;
        cfg.height = gh * cfg.patch;
        cfg.width = gw * cfg.patch;
        cfg.dim = 8 * dim_mult;
        cfg.variant = VariantSpec::new(VariantKind::FullAttention, blocks);
        let full = estimate_flops(&cfg);
        cfg.variant = VariantSpec::new(VariantKind::FacTS, blocks);
        let fac = estimate_flops(&cfg);
        let (n, d, b) = ((gh * gw) as u64, cfg.dim as u64, blocks as u64);
        let gap = 2 * d * (b * (t * n) * (t * n) - (b / 2) * (t * n * n + n * t * t));
        prop_assert_eq!(full - fac, gap);
        prop_assert!(gap > 0);
    }

    #[test]
    fn generation_is_pure_and_binary(seed in any::<u64>(), count in 1usize..4, frames in 1usize..8) {
        let spec = ShapeSpec { seed, ..ShapeSpec::default() };
        let a = gen_moving_shapes(&spec, count, frames).unwrap();
        let b = gen_moving_shapes(&spec, count, frames).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(a.data().contains(&1.0));
    }

    #[test]
    fn tensor_file_round_trip_is_bitwise(dims in prop::collection::vec(1usize..5, 1..=5), seed in any::<u64>(), f64_dtype in any::<bool>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let numel: usize = dims.iter().product();
        let bits: Vec<u64> = (0..numel).map(|_| rng.random()).collect();
        let back = if f64_dtype {
            let t = Tensor::new(&dims, bits.iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
            let bytes = encode_tensor(&t).unwrap();
            match read_tensor(&mut bytes.as_slice()).unwrap() {
                AnyTensor::F64(r) => r.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>() == bits && r.shape() == t.shape(),
                AnyTensor::F32(_) => false,
            }
        } else {
            let b32: Vec<u32> = bits.iter().map(|&b| b as u32).collect();
            let t = Tensor::new(&dims, b32.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
            let bytes = encode_tensor(&t).unwrap();
            match read_tensor(&mut bytes.as_slice()).unwrap() {
                AnyTensor::F32(r) => r.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>() == b32 && r.shape() == t.shape(),
                AnyTensor::F64(_) => false,
            }
        };
        prop_assert!(back);
    }

    #[test]
    fn adamw_without_decay_is_adam(seed in any::<u64>(), steps in 1usize..6, lr in 1e-4f64..1e-1) {
        let mut store = ParamStore::<f64>::new();
        let init = rand_tensor(&[7], seed, -1.0, 1.0);
        let id = store.add("w", init.clone());
        let mut state = OptimizerState::new(&store);
        let cfg = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut theta = init.data().to_vec();
        let (mut m, mut v) = (vec![0.0; 7], vec![0.0; 7]);
        for s in 1..=steps {
            let g = rand_tensor(&[7], seed ^ s as u64, -2.0, 2.0);
            adamw_step(&mut store, std::slice::from_ref(&g), &mut state, lr, &cfg).unwrap();
            for j in 0..7 {
                m[j] = 0.9 * m[j] + 0.1 * g.data()[j];
                v[j] = 0.999 * v[j] + 0.001 * g.data()[j] * g.data()[j];
                let mh = m[j] / (1.0 - 0.9f64.powi(s as i32));
                let vh = v[j] / (1.0 - 0.999f64.powi(s as i32));
                theta[j] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in store.get(id).data().iter().zip(&theta) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn metric_symmetry_identity_and_order_invariance(seed in any::<u64>(), b in 1usize..4, t in 1usize..3) {
        let shape = [b, t, 1, 16, 16];
        let x = rand_tensor(&shape, seed, 0.0, 1.0);
        let y = rand_tensor(&shape, seed ^ 1, 0.0, 1.0);
        let (pxy, pyx) = (pixel_metrics(&x, &y).unwrap(), pixel_metrics(&y, &x).unwrap());
        prop_assert!((pxy.mse - pyx.mse).abs() <= 1e-9 && (pxy.mae - pyx.mae).abs() <= 1e-9);
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() <= 1e-9);
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        prop_assert!((pxy.rmse * pxy.rmse - pxy.mse).abs() <= 1e-9);

        let order: Vec<usize> = (0..b).rev().collect();
        let (xr, yr) = (x.gather_axis0(&order).unwrap(), y.gather_axis0(&order).unwrap());
        let pr = pixel_metrics(&xr, &yr).unwrap();
        prop_assert!((pr.mse - pxy.mse).abs() <= 1e-12 && (pr.mae - pxy.mae).abs() <= 1e-12);
        prop_assert!((ssim(&xr, &yr).unwrap() - ssim(&x, &y).unwrap()).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn training_is_bitwise_deterministic(seed in any::<u64>(), k in kind()) {
        let mut cfg = small_config(k, 2, 4, 4, 1);
        cfg.drop = DropSpec { attn_dropout: 0.1, ffn_dropout: 0.1, drop_path_rate: 0.1, ..DropSpec::none() };
        let tc = TrainConfig { epochs: 2, batch_size: 2, seed, ..TrainConfig::default() };
        let spec = ShapeSpec { height: 8, width: 8, size_min: 2, size_max: 3, seed, ..ShapeSpec::default() };
        let data = predformer::data::SequenceBatch::new(gen_moving_shapes(&spec, 3, 4).unwrap(), 2, 2).unwrap();
        let trace = || {
            let mut tr = Trainer::new(&cfg, &tc, 3).unwrap();
            tr.train_epoch(&data).unwrap();
            tr.train_epoch(&data).unwrap();
            tr.history.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(trace(), trace());
    }
}
