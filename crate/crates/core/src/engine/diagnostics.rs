//! Gradient checks over every differentiable kernel and over the full
//! episode loss of each similarity variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::episode::{EpisodeBatch, EpisodeShape};
use super::model::{Model, ModelConfig};
use crate::error::Result;
use crate::frae::EmbeddingVariant;
use crate::metric::Metric;
use crate::numeric::{
    finite_diff_check, relative_error, BatchNormConfig, GradCheckOptions, GradCheckReport, Graph, Mode, ParamReport,
    RunningStats, Var,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks `build` through a random linear functional of its output.
fn check_op(
    name: &str,
    inputs: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    skip_near_zero: Option<f64>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckEntry> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone().with_grad())).collect();
    let out = build(&mut g, &vars)?;
    let weights: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = g.weighted_sum(out, &weights)?;
    g.backward(loss)?;
    let mut params: Vec<Tensor> = inputs
        .into_iter()
        .zip(&vars)
        .map(|(mut p, &v)| {
            p.grad = Some(g.grad(v).expect("input has a gradient").to_vec());
            p
        })
        .collect();
    let names: Vec<String> = (0..params.len()).map(|i| format!("{name}[{i}]")).collect();
    let opts = GradCheckOptions {
        skip_near_zero,
        ..Default::default()
    };
    let report = finite_diff_check(
        &names,
        &mut params,
        |ps| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
            let out = build(&mut g, &vars)?;
            let s = g.weighted_sum(out, &weights)?;
            Ok(g.value(s).item())
        },
        opts,
    )?;
    Ok(GradCheckEntry {
        name: name.to_string(),
        report,
    })
}

/// One check per graph kernel on random inputs.
pub fn kernel_gradchecks(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let mut out = Vec::new();
    let shape = [2, 3, 4, 6];
    let x = Tensor::randn(&shape, 1.0, r);

    let w = Tensor::randn(&[2, 3, 3, 3], 0.5, r);
    let b = Tensor::randn(&[2], 0.5, r);
    out.push(check_op("conv2d", vec![x.clone(), w, b], r, None, |g, v| g.conv2d(v[0], v[1], v[2], 1))?);

    for mode in [Mode::Train, Mode::Eval] {
        let gamma = Tensor::randn(&[3], 1.0, r);
        let beta = Tensor::randn(&[3], 1.0, r);
        let stats = RunningStats {
            mean: Some(vec![0.3; 3]),
            var: Some(vec![1.7; 3]),
        };
        let name = format!("batchnorm2d/{}", if mode == Mode::Train { "train" } else { "eval" });
        out.push(check_op(&name, vec![x.clone(), gamma, beta], r, None, |g, v| {
            let mut st = stats.clone();
            g.batchnorm2d(v[0], v[1], v[2], &mut st, mode, BatchNormConfig::default())
        })?);
    }
    out.push(check_op("leaky_relu", vec![x.clone()], r, Some(1e-4), |g, v| g.leaky_relu(v[0], 0.2))?);
    out.push(check_op("maxpool2", vec![x.clone()], r, None, |g, v| g.maxpool2(v[0]))?);
    out.push(check_op("upsample_bilinear2", vec![x.clone()], r, None, |g, v| g.upsample_bilinear2(v[0]))?);
    out.push(check_op("descriptor_columns", vec![x.clone()], r, None, |g, v| {
        let d = g.descriptor_matrix(v[0])?;
        let n = g.shape(d)[1];
        let a = g.select_columns(d, 0, n / 2 + 1)?;
        let b = g.select_columns(d, n / 3, n - n / 3)?;
        g.concat_columns(&[b, a])
    })?);

    let (d, p, q) = (5, 6, 8);
    let a = Tensor::randn(&[d, p], 1.0, r);
    let b = Tensor::randn(&[d, q], 1.0, r);
    let f = Tensor::scalar(0.5 + r.gen::<f64>());
    out.push(check_op("standardize_columns", vec![a.clone()], r, None, |g, v| g.standardize_columns(v[0], 1e-10))?);
    out.push(check_op("ndp_project", vec![a.clone(), f.clone()], r, None, |g, v| g.ndp_project(v[0], v[1]))?);
    out.push(check_op("matmul_tn", vec![a.clone(), b.clone()], r, None, |g, v| g.matmul_tn(v[0], v[1]))?);
    out.push(check_op("abs", vec![a.clone()], r, Some(1e-4), |g, v| Ok(g.abs(v[0])))?);
    out.push(check_op("cosine_scores", vec![a.clone(), b], r, None, |g, v| g.cosine_scores(v[0], v[1], 1e-8))?);
    let pos = Tensor::new(a.shape(), a.data().iter().map(|v| v.abs()).collect())?;
    out.push(check_op("gaussian_kernel", vec![pos, f], r, None, |g, v| g.gaussian_kernel(v[0], v[1]))?);
    let scores = Tensor::randn(&[4, 2 * p], 1.0, r);
    out.push(check_op("topk_group_sum", vec![scores], r, None, |g, v| g.topk_group_sum(v[0], 3, 2))?);
    out.push(check_op("stack_scale_sum", vec![a.clone(), a], r, None, |g, v| {
        let s0 = g.sum(v[0]);
        let s1 = g.weighted_sum(v[1], &[0.5; 30])?;
        let s1 = g.scale(s1, -1.5);
        let s2 = g.add(s0, s1)?;
        g.stack_columns(&[s0, s1, s2])
    })?);
    let logits = Tensor::randn(&[4, 3], 2.0, r);
    out.push(check_op("softmax_cross_entropy", vec![logits], r, None, |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    })?);
    Ok(out)
}

/// One-sided slope disagreement that marks a coordinate as sitting on a kink.
pub const KINK_TOL: f64 = 1e-3;

/// Conv biases that feed a train-mode batch norm: the normalization removes
/// them, so their exact derivative is zero.
fn cancelled_by_norm(model: &Model, name: &str) -> bool {
    let fusion_normed = model.config.fusion_norm_act;
    (name.starts_with("block") && name.ends_with(".conv.bias")) || (fusion_normed && name == "fusion.conv.bias")
}

/// A random episode of `size`-pixel images.
pub fn random_batch(shape: EpisodeShape, size: usize, rng: &mut impl Rng) -> Result<EpisodeBatch> {
    let n = shape.way * (shape.shot + shape.queries);
    let data = (0..n * 3 * size * size).map(|_| rng.gen::<f64>()).collect();
    Ok(EpisodeBatch {
        shape,
        images: Tensor::new(&[n, 3, size, size], data)?,
        labels: (0..shape.way).flat_map(|c| std::iter::repeat_n(c, shape.queries)).collect(),
    })
}

/// Train-mode episode loss against central differences for a sample of
/// coordinates of every parameter (at most `max_elements` each).
pub fn episode_gradcheck(config: ModelConfig, seed: u64, max_elements: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Model::init(config, &mut rng)?;
    // move α and β off their initial values so each enters non-trivially
    for p in base.projection.params_mut().into_iter().take(2) {
        p.data_mut()[0] = 0.6 + rng.gen::<f64>();
    }
    let shape = EpisodeShape {
        way: 3,
        shot: 2,
        queries: 1,
    };
    let batch = random_batch(shape, 8, &mut rng)?;
    let mut probe = base.clone();
    probe.forward_backward(&batch)?;

    let mut names = Vec::new();
    let mut params = Vec::new();
    let mut index = Vec::new();
    let mut zero_reports = Vec::new();
    for (i, (name, t)) in probe.named_params().into_iter().enumerate() {
        if cancelled_by_norm(&probe, &name) {
            let g = t.grad.as_deref().unwrap_or(&[]);
            let worst = g.iter().map(|&v| relative_error(v, 0.0)).fold(0.0, f64::max);
            zero_reports.push(ParamReport {
                name: format!("{name} (exact 0)"),
                max_rel_error: worst,
                worst_index: None,
                checked: g.len(),
                skipped: 0,
            });
        } else {
            names.push(name);
            params.push(t.clone());
            index.push(i);
        }
    }
    let opts = GradCheckOptions {
        max_elements: Some(max_elements),
        kink_tol: Some(KINK_TOL),
        ..Default::default()
    };
    let mut report = finite_diff_check(
        &names,
        &mut params,
        |ps| {
            let mut m = base.clone();
            let mut slots = m.params_mut();
            for (&i, p) in index.iter().zip(ps) {
                slots[i].data_mut().copy_from_slice(p.data());
            }
            Ok(m.forward(&batch, Mode::Train)?.loss)
        },
        opts,
    )?;
    report.params.extend(zero_reports);
    Ok(report)
}

/// The model variants exercised end to end.
pub fn episode_variants() -> Vec<(&'static str, ModelConfig)> {
    let with = |embedding, metric, k| ModelConfig {
        embedding,
        metric,
        k,
        ..Default::default()
    };
    vec![
        ("episode/ndp_abs_inner", with(EmbeddingVariant::Frae, Metric::NdpAbsInner, 1)),
        ("episode/ndp_abs_inner_k3", with(EmbeddingVariant::Frae, Metric::NdpAbsInner, 3)),
        ("episode/conv64f", with(EmbeddingVariant::Conv64f, Metric::NdpAbsInner, 1)),
        ("episode/cosine", with(EmbeddingVariant::Frae, Metric::Cosine, 1)),
        (
            "episode/gaussian_kernel",
            // a wider kernel keeps raw inner products off the saturated tail
            ModelConfig {
                delta: 20.0,
                ..with(EmbeddingVariant::Frae, Metric::GaussianKernel, 2)
            },
        ),
        ("episode/raw_abs_inner", with(EmbeddingVariant::Frae, Metric::RawAbsInner, 1)),
    ]
}

/// Every kernel check followed by every end-to-end episode check.
pub fn gradient_suite(seed: u64, max_elements: usize) -> Result<Vec<GradCheckEntry>> {
    let mut out = kernel_gradchecks(seed)?;
    for (i, (name, config)) in episode_variants().into_iter().enumerate() {
        out.push(GradCheckEntry {
            name: name.to_string(),
            report: episode_gradcheck(config, seed.wrapping_add(i as u64 + 1), max_elements)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_fresh_weights() {
        let t = std::time::Instant::now();
        for entry in gradient_suite(3, 6).unwrap() {
            assert!(entry.report.passed(), "{}\n{}", entry.name, entry.report);
        }
        eprintln!("suite took {:.1}s", t.elapsed().as_secs_f64());
    }

    #[test]
    fn broken_gradient_is_reported() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let e = check_op("doubled", vec![Tensor::randn(&[3], 1.0, &mut r)], &mut r, None, |g, v| {
            // forward is 2x, but the constant path hides half of it from backward
            let c = g.constant(g.value(v[0]).clone());
            g.add(v[0], c)
        })
        .unwrap();
        assert!(!e.report.passed());
    }
}
