use ndpnet_core::frae::{
    embed, extract_descriptors, frae_forward, fuse_levels, EmbeddingOptions, EmbeddingVariant, FraeWeights, FusionParams,
    FusionVars, CHANNELS,
};
use ndpnet_core::numeric::{finite_diff_check, GradCheckOptions, Graph, Mode, RunningStats};
use ndpnet_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weights(variant: EmbeddingVariant, seed: u64) -> FraeWeights {
    let options = EmbeddingOptions {
        variant,
        ..Default::default()
    };
    FraeWeights::init(options, &mut rng(seed))
}

fn images(b: usize, n: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..b * 3 * n * n).map(|_| r.gen::<f64>()).collect();
    Tensor::new(&[b, 3, n, n], data).unwrap()
}

#[test]
fn shape_law_84_frae() {
    let mut w = weights(EmbeddingVariant::Frae, 1);
    let out = frae_forward(&images(2, 84, 2), &mut w, Mode::Train).unwrap();
    assert_eq!(out.len(), 2);
    for ds in &out {
        assert_eq!((ds.dim(), ds.h, ds.w, ds.count()), (64, 21, 21, 441));
    }
}

#[test]
fn shape_law_32_frae() {
    let mut w = weights(EmbeddingVariant::Frae, 1);
    let out = frae_forward(&images(2, 32, 3), &mut w, Mode::Train).unwrap();
    assert_eq!((out[0].dim(), out[0].h, out[0].w, out[0].count()), (64, 8, 8, 64));
}

#[test]
fn shape_law_84_conv64f() {
    let mut w = weights(EmbeddingVariant::Conv64f, 1);
    let out = frae_forward(&images(2, 84, 4), &mut w, Mode::Train).unwrap();
    assert_eq!((out[0].dim(), out[0].h, out[0].w, out[0].count()), (64, 21, 21, 441));
}

#[test]
fn shape_law_small_sizes() {
    for variant in [EmbeddingVariant::Frae, EmbeddingVariant::Conv64f] {
        for n in [4, 8, 12, 16, 20] {
            let mut w = weights(variant, 5);
            let out = frae_forward(&images(2, n, 6), &mut w, Mode::Train).unwrap();
            assert_eq!((out[0].h, out[0].w), (n / 4, n / 4), "{variant:?} n={n}");
        }
    }
}

#[test]
fn indivisible_size_names_the_factor() {
    let mut w = weights(EmbeddingVariant::Frae, 1);
    let err = frae_forward(&images(1, 10, 1), &mut w, Mode::Train).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(err.to_string().contains("multiple of 4"), "{err}");
}

fn identity_fusion() -> FusionParams {
    let mut weight = vec![0.0; CHANNELS * CHANNELS * 9];
    for c in 0..CHANNELS {
        weight[(c * CHANNELS + c) * 9 + 4] = 1.0;
    }
    FusionParams {
        weight: Tensor::new(&[CHANNELS, CHANNELS, 3, 3], weight).unwrap(),
        bias: Tensor::zeros(&[CHANNELS]),
        norm: None,
    }
}

fn run_fusion(omegas: [Tensor; 4], fusion: &mut FusionParams) -> Tensor {
    let mut g = Graph::new();
    let [o1, o2, o3, o4] = omegas.map(|t| g.constant(t));
    let vars = FusionVars {
        weight: g.constant(fusion.weight.clone()),
        bias: g.constant(fusion.bias.clone()),
        norm: None,
    };
    let out = fuse_levels(&mut g, o1, o2, o3, o4, fusion, vars, Mode::Train, &EmbeddingOptions::default()).unwrap();
    g.value(out).clone()
}

fn random_map(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Window-scan 2x2 max pool, independent of the library kernel.
fn pool_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::new();
    for p in 0..planes {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |di: usize, dj: usize| x.data()[p * h * w + (2 * i + di) * w + 2 * j + dj];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

#[test]
fn fusion_with_zero_deep_maps_is_pooled_shallow_map() {
    let o1 = random_map(&[2, CHANNELS, 6, 6], 11);
    let zero = Tensor::zeros(&[2, CHANNELS, 3, 3]);
    let out = run_fusion([o1.clone(), zero.clone(), zero.clone(), zero], &mut identity_fusion());
    assert_eq!(out.shape(), &[2, CHANNELS, 3, 3]);
    assert_eq!(out.data(), pool_oracle(&o1).as_slice());
}

#[test]
fn fusion_of_constant_maps_is_constant() {
    let c1 = Tensor::full(&[1, CHANNELS, 4, 4], 0.5);
    let c2 = Tensor::full(&[1, CHANNELS, 2, 2], 1.0);
    let c3 = Tensor::full(&[1, CHANNELS, 2, 2], -0.25);
    let c4 = Tensor::full(&[1, CHANNELS, 2, 2], 2.0);
    let out = run_fusion([c1, c2, c3, c4], &mut identity_fusion());
    // identity conv at the zero-padded border still sees the centre tap only
    assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-12), "{:?}", &out.data()[..4]);
}

#[test]
fn fusion_sums_deep_maps_before_upsampling() {
    // Ω3 = Ω4 = 0 must give the same result as feeding Ω2 alone in any slot.
    let o1 = random_map(&[1, CHANNELS, 4, 4], 21);
    let o2 = random_map(&[1, CHANNELS, 2, 2], 22);
    let zero = Tensor::zeros(&[1, CHANNELS, 2, 2]);
    let mut fusion = identity_fusion();
    let a = run_fusion([o1.clone(), o2.clone(), zero.clone(), zero.clone()], &mut fusion);
    let b = run_fusion([o1, zero.clone(), zero, o2], &mut fusion);
    assert_eq!(a.data(), b.data());
}

#[test]
fn fusion_depends_on_shallow_map() {
    let mut w = weights(EmbeddingVariant::Frae, 31);
    let fusion = w.fusion.as_mut().unwrap();
    let deep = || random_map(&[1, CHANNELS, 3, 3], 32);
    let with = run_fusion([random_map(&[1, CHANNELS, 6, 6], 33), deep(), deep(), deep()], fusion);
    let without = run_fusion([Tensor::zeros(&[1, CHANNELS, 6, 6]), deep(), deep(), deep()], fusion);
    assert!(with.max_abs_diff(&without) > 1e-3);
}

#[test]
fn fusion_rejects_mismatched_levels() {
    let mut g = Graph::new();
    let mut fusion = identity_fusion();
    let o1 = g.constant(Tensor::zeros(&[1, CHANNELS, 6, 6]));
    let o2 = g.constant(Tensor::zeros(&[1, CHANNELS, 2, 2]));
    let vars = FusionVars {
        weight: g.constant(fusion.weight.clone()),
        bias: g.constant(fusion.bias.clone()),
        norm: None,
    };
    let err = fuse_levels(&mut g, o1, o2, o2, o2, &mut fusion, vars, Mode::Train, &EmbeddingOptions::default());
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn eval_mode_is_batch_decomposable() {
    for variant in [EmbeddingVariant::Frae, EmbeddingVariant::Conv64f] {
        let mut w = weights(variant, 41);
        frae_forward(&images(4, 16, 42), &mut w, Mode::Train).unwrap();
        let batch = images(3, 16, 43);
        let together = frae_forward(&batch, &mut w, Mode::Eval).unwrap();
        let per = 3 * 16 * 16;
        for (b, joint) in together.iter().enumerate() {
            let single = Tensor::new(&[1, 3, 16, 16], batch.data()[b * per..(b + 1) * per].to_vec()).unwrap();
            let alone = frae_forward(&single, &mut w, Mode::Eval).unwrap();
            assert!(alone[0].matrix.max_abs_diff(&joint.matrix) < 1e-10);
        }
    }
}

#[test]
fn eval_mode_leaves_running_stats_alone() {
    let mut w = weights(EmbeddingVariant::Frae, 51);
    frae_forward(&images(2, 8, 52), &mut w, Mode::Train).unwrap();
    let snapshot: Vec<RunningStats> = w.running_stats_mut().into_iter().map(|(_, s)| s.clone()).collect();
    frae_forward(&images(2, 8, 53), &mut w, Mode::Eval).unwrap();
    let after: Vec<RunningStats> = w.running_stats_mut().into_iter().map(|(_, s)| s.clone()).collect();
    assert_eq!(snapshot, after);
}

#[test]
fn descriptor_columns_follow_row_major_positions() {
    let maps = Tensor::new(&[1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
    let sets = extract_descriptors(&maps).unwrap();
    assert_eq!(sets[0].column(0), vec![0.0, 6.0]);
    assert_eq!(sets[0].column(4), vec![4.0, 10.0]);
    assert_eq!((sets[0].h, sets[0].w), (2, 3));
}

fn embedding_gradcheck(variant: EmbeddingVariant, fusion_norm_act: bool, seed: u64) {
    let options = EmbeddingOptions {
        variant,
        fusion_norm_act,
        ..Default::default()
    };
    let base = FraeWeights::init(options, &mut rng(seed));
    let x = images(2, 8, seed + 1);
    let mut r = rng(seed + 2);
    let coeffs: Vec<f64> = (0..2 * 64 * 2 * 2).map(|_| r.gen_range(-1.0..1.0)).collect();

    let loss = |params: &[Tensor], want_grad: bool| -> ndpnet_core::Result<(f64, Vec<Tensor>)> {
        let mut w = base.clone();
        for (dst, src) in w.params_mut().into_iter().zip(params) {
            *dst = src.clone();
        }
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let vars = w.bind(&mut g, want_grad);
        let out = embed(&mut g, xi, &mut w, &vars, Mode::Train)?;
        let total = g.weighted_sum(out, &coeffs)?;
        let value = g.value(total).item();
        let mut grads = Vec::new();
        if want_grad {
            g.backward(total)?;
            for (v, p) in vars.iter().zip(params) {
                let mut t = p.clone();
                t.grad = Some(g.grad(*v).unwrap().to_vec());
                grads.push(t);
            }
        }
        Ok((value, grads))
    };

    let names: Vec<String> = base.named_params().into_iter().map(|(n, _)| n).collect();
    let start: Vec<Tensor> = base.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let (_, all) = loss(&start, true).unwrap();

    // A conv bias feeding train-mode batch norm is cancelled by the batch mean,
    // so its true gradient is exactly zero and finite differences only see noise.
    let before_norm = |n: &str| n.ends_with("conv.bias") && (n.starts_with("block") || fusion_norm_act);
    for (n, p) in names.iter().zip(&all) {
        if before_norm(n) {
            let worst = p.grad.as_ref().unwrap().iter().fold(0.0f64, |a, g| a.max(g.abs()));
            assert!(worst < 1e-9, "{n}: {worst}");
        }
    }
    let keep: Vec<usize> = (0..names.len()).filter(|&i| !before_norm(&names[i])).collect();
    let checked_names: Vec<String> = keep.iter().map(|&i| names[i].clone()).collect();
    let mut params: Vec<Tensor> = keep.iter().map(|&i| all[i].clone()).collect();
    let opts = GradCheckOptions {
        max_elements: Some(6),
        ..Default::default()
    };
    let report = finite_diff_check(
        &checked_names,
        &mut params,
        |p| {
            let mut full = start.clone();
            for (&i, t) in keep.iter().zip(p) {
                full[i] = t.clone();
            }
            Ok(loss(&full, false)?.0)
        },
        opts,
    )
    .unwrap();
    assert!(report.passed(), "{variant:?}\n{report}");
}

#[test]
fn embedding_gradients_match_finite_differences() {
    embedding_gradcheck(EmbeddingVariant::Frae, false, 61);
}

#[test]
fn embedding_gradients_with_fusion_norm() {
    embedding_gradcheck(EmbeddingVariant::Frae, true, 71);
}

#[test]
fn conv64f_gradients_match_finite_differences() {
    embedding_gradcheck(EmbeddingVariant::Conv64f, false, 81);
}
