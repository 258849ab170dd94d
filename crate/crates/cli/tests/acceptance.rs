//! Acceptance checks, one printed PASS/FAIL line per check.
//!
//! Runs as a single test so the heavy training criteria execute once and the
//! report prints in order. Expect roughly fifteen minutes on one core.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ndpnet_cli::run_cli;
use ndpnet_core::engine::diagnostics::gradient_suite;
use ndpnet_core::engine::eval::{confidence_interval, evaluate, EpisodeScorer};
use ndpnet_core::engine::train::{train, window_mean, TrainOptions, LATEST_CHECKPOINT};
use ndpnet_core::engine::{
    load_checkpoint, synth_dataset, AugmentConfig, Config, EpisodeBatch, EpisodeShape, TrainState,
};
use ndpnet_core::engine::train::prepare_data;
use ndpnet_core::frae::{frae_forward, DescriptorSet, EmbeddingOptions, FraeWeights};
use ndpnet_core::metric::{
    class_similarity, image_similarity, knn_select, project_value, standardize, Metric, ProjectionParams, ScoreMatrix,
    SimilarityVariant,
};
use ndpnet_core::numeric::{adam_step, AdamState, Mode};
use ndpnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("ndpnet").chain(args.iter().copied()))
}

// 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let entries = gradient_suite(1, 8).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for e in &entries {
        ensure(e.report.passed(), format!("{} failed:\n{}", e.name, e.report))?;
        worst = worst.max(e.report.max_rel_error());
        checked += e.report.params.iter().map(|p| p.checked).sum::<usize>();
        skipped += e.report.params.iter().map(|p| p.skipped).sum::<usize>();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    ensure(entries.iter().any(|e| e.name.starts_with("episode/")), "no end-to-end check")?;
    ensure(skipped * 10 < checked, format!("{skipped} of {checked} coordinates skipped as kinks"))?;
    let code = cli(&["gradcheck", "--max-elements", "4"]);
    ensure(code == 0, format!("gradcheck command exited {code}"))?;
    Ok(format!(
        "{} checks, max rel err {worst:.2e} < 1e-4 (h=1e-5), {checked} coords, {skipped} kink-skipped, {secs:.1}s",
        entries.len()
    ))
}

// 2 ------------------------------------------------------------------------

fn shape_law() -> Check {
    let mut weights = FraeWeights::init(EmbeddingOptions::default(), &mut rng(2));
    let mut out = Vec::new();
    for (n, side) in [(84, 21), (32, 8)] {
        let images = Tensor::randn(&[2, 3, n, n], 1.0, &mut rng(n as u64));
        let sets = frae_forward(&images, &mut weights, Mode::Train).map_err(|e| e.to_string())?;
        ensure(sets.len() == 2, "one descriptor set per image")?;
        for s in &sets {
            ensure(
                s.dim() == 64 && s.h == side && s.w == side && s.count() == side * side,
                format!("{n}x{n}: d={} h={} w={} m={}", s.dim(), s.h, s.w, s.count()),
            )?;
        }
        out.push(format!("{n}->d=64,m={}", side * side));
    }
    Ok(out.join("; "))
}

// 3 ------------------------------------------------------------------------

fn projection_properties() -> Check {
    let mut r = rng(3);
    for alpha in [0.25, 1.0, 4.0] {
        let mut xs: Vec<f64> = (0..10_000).map(|_| r.gen_range(-6.0 * alpha..=6.0 * alpha)).collect();
        xs.extend([0.0, 6.0 * alpha, -6.0 * alpha]);
        for &x in &xs {
            let y = project_value(x, alpha);
            ensure(y > -1.0 && y < 1.0, format!("f({x}) = {y} outside (-1, 1)"))?;
            ensure(project_value(-x, alpha) == -y, format!("oddness fails at {x}"))?;
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for w in xs.windows(2) {
            let (a, b) = (project_value(w[0], alpha), project_value(w[1], alpha));
            ensure(a < b, format!("not increasing: f({}) = {a}, f({}) = {b}", w[0], w[1]))?;
        }
        ensure(project_value(0.0, alpha) == 0.0, "f(0) != 0")?;
        let tail = project_value(6.0 * alpha, alpha).abs();
        ensure(tail > 0.9999, format!("|f(6a)| = {tail}"))?;
    }
    Ok("alpha in {0.25,1,4}, 10^4 points each: range, oddness, monotonicity, f(0)=0, |f(6a)|>0.9999".into())
}

// 4 ------------------------------------------------------------------------

fn standardization() -> Check {
    let mut r = rng(4);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for _ in 0..200 {
        let (d, m) = (r.gen_range(2..80), r.gen_range(1..30));
        let scale = 10f64.powf(r.gen_range(-1.0..2.0));
        let offset = r.gen_range(-50.0..50.0);
        let data: Vec<f64> = (0..d * m).map(|_| offset + scale * r.gen_range(-1.0..1.0)).collect();
        let set = DescriptorSet::new(Tensor::new(&[d, m], data).unwrap(), 1, m).unwrap();
        let z = standardize(&set).map_err(|e| e.to_string())?;
        for j in 0..m {
            let c = z.column(j);
            let mean = c.iter().sum::<f64>() / d as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    ensure(worst_mean < 1e-10, format!("mean {worst_mean:e}"))?;
    ensure(worst_var < 1e-6, format!("variance off by {worst_var:e}"))?;
    Ok(format!("max |mean| {worst_mean:.1e} < 1e-10, max |var-1| {worst_var:.1e} < 1e-6"))
}

// 5 ------------------------------------------------------------------------

fn full_sort_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn knn_equivalence() -> Check {
    let mut r = rng(5);
    let mut with_ties = 0;
    for trial in 0..1000 {
        let (rows, cols) = (r.gen_range(1..16), r.gen_range(5..40));
        // every third matrix is coarsely quantized so ties are frequent
        let coarse = trial % 3 == 0;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let v: f64 = r.gen();
                if coarse {
                    (v * 3.0).floor()
                } else {
                    v
                }
            })
            .collect();
        with_ties += coarse as usize;
        let scores = ScoreMatrix {
            values: Tensor::new(&[rows, cols], data).unwrap(),
            metric: Metric::NdpAbsInner,
        };
        for k in [1, 3, 5] {
            let got = knn_select(&scores, k).map_err(|e| e.to_string())?;
            for (i, row) in got.iter().enumerate() {
                ensure(
                    *row == full_sort_top_k(scores.row(i), k),
                    format!("trial {trial} row {i} k={k}: {row:?}"),
                )?;
            }
        }
    }
    Ok(format!("1000 matrices x k in {{1,3,5}} ({with_ties} tie-heavy) identical to full sort"))
}

// 6 ------------------------------------------------------------------------

fn random_set(d: usize, m: usize, r: &mut ChaCha8Rng) -> DescriptorSet {
    let data = (0..d * m).map(|_| r.gen_range(-2.0..2.0)).collect();
    DescriptorSet::new(Tensor::new(&[d, m], data).unwrap(), 1, m).unwrap()
}

/// Standardize then project one descriptor, straight from the definitions.
fn prepared(col: &[f64], factor: f64) -> Vec<f64> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    col.iter()
        .map(|v| {
            let a = (v - mean) / (var + 1e-10).sqrt();
            a.signum() * (1.0 - (-a * a / (2.0 * factor * factor)).exp()) * (a != 0.0) as u8 as f64
        })
        .collect()
}

/// Double loop over query descriptors and support descriptors; keeps the k largest |q.s|.
fn double_loop(q: &DescriptorSet, pool: &[&DescriptorSet], alpha: f64, beta: f64, k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..q.count() {
        let qi = prepared(&q.column(i), alpha);
        let mut best = vec![f64::NEG_INFINITY; k];
        for s in pool {
            for j in 0..s.count() {
                let sj = prepared(&s.column(j), beta);
                let v = qi.iter().zip(&sj).map(|(a, b)| a * b).sum::<f64>().abs();
                if v > best[k - 1] {
                    best[k - 1] = v;
                    best.sort_by(|a, b| b.total_cmp(a));
                }
            }
        }
        total += best.iter().sum::<f64>();
    }
    total
}

fn similarity_equivalence() -> Check {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (d, m, shot) = (r.gen_range(3..16), r.gen_range(1..8), r.gen_range(1..5));
        let (alpha, beta) = (r.gen_range(0.3..3.0), r.gen_range(0.3..3.0));
        let params = ProjectionParams::new(alpha, beta, 1.0).unwrap();
        let q = random_set(d, m, &mut r);
        let class: Vec<DescriptorSet> = (0..shot).map(|_| random_set(d, m, &mut r)).collect();
        let pool: Vec<&DescriptorSet> = class.iter().collect();

        let ic = class_similarity(&q, &class, &params, SimilarityVariant::default()).map_err(|e| e.to_string())?;
        worst = worst.max((ic - double_loop(&q, &pool, alpha, beta, 1)).abs());
        for k in 1..=m.min(5) {
            let v = SimilarityVariant::new(Metric::NdpAbsInner, k).unwrap();
            let ir = image_similarity(&q, &class[0], &params, v).map_err(|e| e.to_string())?;
            worst = worst.max((ir - double_loop(&q, &pool[..1], alpha, beta, k)).abs());
        }
        let r1 = image_similarity(&q, &class[0], &params, SimilarityVariant::default()).unwrap();
        let c1 = class_similarity(&q, &class[..1], &params, SimilarityVariant::default()).unwrap();
        ensure(r1 == c1, format!("K=1,k=1: {r1} != {c1}"))?;
    }
    ensure(worst < 1e-10, format!("max deviation {worst:e}"))?;
    Ok(format!("100 episodes, max deviation {worst:.1e} < 1e-10; K=1,k=1 exact"))
}

// 7 ------------------------------------------------------------------------

fn learning_smoke(root: &Path) -> Check {
    let start = Instant::now();
    let run = root.join("train");
    let run_s = run.to_str().unwrap();
    let code = cli(&["train", "--out", run_s]);
    ensure(code == 0, format!("train exited {code}"))?;
    let config = Config::load(&run.join("config.toml"), &[]).map_err(|e| e.to_string())?;
    ensure(config == Config::default(), "resolved config differs from defaults")?;
    let classes: usize = config.data.synthetic_classes.iter().sum();
    ensure(classes == 20 && config.episode.way == 5 && config.episode.shot == 1, "not 20-class 5-way 1-shot")?;
    ensure(config.train.episodes <= 5000, "too many episodes")?;

    let log = std::fs::read_to_string(run.join("train_log.csv")).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let first = window_mean(&losses, 0, 200);
    let last = window_mean(&losses, losses.len().saturating_sub(200), 200);
    let drop = 1.0 - last / first;

    let ckpt = load_checkpoint(&run.join(LATEST_CHECKPOINT)).map_err(|e| e.to_string())?;
    let data = prepare_data(&config).map_err(|e| e.to_string())?;
    let mut model = ckpt.state.model;
    let report = evaluate(&mut model, &data.test, 200, config.episode.eval_shape(), &config.augment, config.seed)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} episodes, test acc {:.2}±{:.2}% over 200 episodes, loss MA {first:.3}->{last:.3} (-{:.0}%), {secs:.0}s",
        losses.len(),
        100.0 * report.mean,
        100.0 * report.half_width,
        100.0 * drop
    );
    ensure(report.mean >= 0.90, detail.clone())?;
    ensure(drop >= 0.30, detail.clone())?;
    ensure(secs <= 900.0, detail.clone())?;
    Ok(detail)
}

// 8 ------------------------------------------------------------------------

fn ablation_harness(root: &Path) -> Check {
    let start = Instant::now();
    let dir = root.join("ablate");
    let code = cli(&[
        "ablate",
        "--out",
        dir.to_str().unwrap(),
        "--set",
        "train.episodes=300",
        "--set",
        "train.val_episodes=0",
        "--set",
        "eval.episodes=100",
    ]);
    ensure(code == 0, format!("ablate exited {code}"))?;
    let table = std::fs::read_to_string(dir.join("ablation.txt")).map_err(|e| e.to_string())?;
    ensure(table.lines().count() == 7, format!("table shape:\n{table}"))?;
    let csv = std::fs::read_to_string(dir.join("ablation.csv")).map_err(|e| e.to_string())?;
    let mut cells = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ensure(f.len() == 6, format!("bad row `{line}`"))?;
        let (mean, hw): (f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        ensure((0.0..=1.0).contains(&mean) && hw >= 0.0 && hw.is_finite(), format!("bad cell `{line}`"))?;
        cells.insert((f[0].to_string(), f[1].parse::<usize>().unwrap()), (mean, hw));
    }
    ensure(cells.len() == 15, format!("{} cells", cells.len()))?;
    let mut notes = Vec::new();
    for k in [1, 3, 5] {
        let (n, nh) = cells[&("NDPNet".to_string(), k)];
        let (f, fh) = cells[&("FRaENet".to_string(), k)];
        notes.push(format!("k={k} NDPNet {:.1} vs FRaENet {:.1}", 100.0 * n, 100.0 * f));
        ensure(n >= f - (nh + fh), format!("k={k}: NDPNet {n:.3}±{nh:.3} below FRaENet {f:.3}±{fh:.3}"))?;
    }
    report(&table);
    Ok(format!(
        "5x3 grid complete, {} ({:.0}s; statistical check)",
        notes.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

// 9 ------------------------------------------------------------------------

struct RandomLogits(ChaCha8Rng);

impl EpisodeScorer for RandomLogits {
    fn score(&mut self, batch: &EpisodeBatch) -> ndpnet_core::Result<Tensor> {
        let (q, w) = (batch.query_count(), batch.shape.way);
        Tensor::new(&[q, w], (0..q * w).map(|_| self.0.gen::<f64>()).collect())
    }
}

fn optimizer_and_statistics() -> Check {
    // lr 0.1, default betas and eps, gradients 0.5 then -0.25 from x = 1
    let expected = [0.900_000_002, 0.873_366_298_707_846_2];
    let mut x = Tensor::scalar(1.0);
    let mut state = AdamState::new([&x], 0.1);
    for (g, want) in [0.5, -0.25].into_iter().zip(expected) {
        x.grad = Some(vec![g]);
        adam_step(&mut [&mut x], &mut state).map_err(|e| e.to_string())?;
        ensure((x.item() - want).abs() < 1e-12, format!("adam {} vs {want}", x.item()))?;
    }

    let (mean, hw) = confidence_interval(&[0.5, 0.7]).map_err(|e| e.to_string())?;
    ensure((mean - 0.6).abs() < 1e-3 && (hw - 0.196).abs() < 1e-3, format!("ci ({mean}, {hw})"))?;

    let ds = synth_dataset(10, 20, 8, 9).map_err(|e| e.to_string())?;
    let aug = AugmentConfig {
        resize: 8,
        crop: 8,
        flip: false,
        rotate: false,
    };
    let shape = EpisodeShape {
        way: 5,
        shot: 1,
        queries: 15,
    };
    let report = evaluate(&mut RandomLogits(rng(9)), &ds, 600, shape, &aug, 9).map_err(|e| e.to_string())?;
    ensure((report.mean - 0.2).abs() < 0.05, format!("random logits mean {}", report.mean))?;
    Ok(format!(
        "adam 2 steps within 1e-12; ci(0.5,0.7) = ({mean:.3}, {hw:.4}); random 5-way mean {:.4} over 600",
        report.mean
    ))
}

// 10 -----------------------------------------------------------------------

fn bits(v: &Option<Vec<f64>>) -> Option<Vec<u64>> {
    v.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect())
}

/// Bitwise equality of everything a checkpoint persists.
fn states_bit_equal(a: &TrainState, b: &TrainState) -> bool {
    let (pa, pb) = (a.model.named_params(), b.model.named_params());
    let (sa, sb) = (a.model.embedding.running_stats(), b.model.embedding.running_stats());
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|((na, x), (nb, y))| na == nb && x.bit_eq(y))
        && sa.len() == sb.len()
        && sa
            .iter()
            .zip(&sb)
            .all(|((na, x), (nb, y))| na == nb && bits(&x.mean) == bits(&y.mean) && bits(&x.var) == bits(&y.var))
        && a.adam.step_count == b.adam.step_count
        && a.adam.m.iter().chain(&a.adam.v).zip(b.adam.m.iter().chain(&b.adam.v)).all(|(x, y)| x.bit_eq(y))
        && a.episode == b.episode
        && a.rng == b.rng
        && a.best_val.map(f64::to_bits) == b.best_val.map(f64::to_bits)
}

fn determinism_and_persistence(root: &Path) -> Check {
    let config = Config::parse(
        "seed = 5\n[data]\nsynthetic_classes = [6, 5, 5]\nsynthetic_per_class = 20\nsynthetic_size = 16\n\
         [augment]\nresize = 16\ncrop = 12\n\
         [train]\nepisodes = 12\nval_interval = 4\nval_episodes = 4\ncheckpoint_interval = 6\nlr_halving_interval = 8\n",
        &[],
    )
    .map_err(|e| e.to_string())?;
    let data = prepare_data(&config).map_err(|e| e.to_string())?;
    let run = |dir: Option<&Path>, state: TrainState, stop: Option<u64>| {
        let mut options = TrainOptions {
            out_dir: dir.map(Path::to_path_buf),
            stop_at: stop,
            ..Default::default()
        };
        train(&config, &data, state, &mut options).map_err(|e| e.to_string())
    };
    let fresh = || TrainState::new(&config).map_err(|e| e.to_string());
    let a = run(None, fresh()?, None)?;
    let b = run(None, fresh()?, None)?;
    let losses = |log: &[ndpnet_core::engine::LogRecord]| log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    ensure(losses(&a.log) == losses(&b.log) && states_bit_equal(&a.state, &b.state), "fixed-seed runs differ")?;

    let dir = root.join("resume");
    let first = run(Some(&dir), fresh()?, Some(6))?;
    let ckpt = load_checkpoint(&dir.join(LATEST_CHECKPOINT)).map_err(|e| e.to_string())?;
    ensure(
        states_bit_equal(&ckpt.state, &first.state) && ckpt.config == config,
        "checkpoint round trip not bit-exact",
    )?;
    let rest = run(Some(&dir), ckpt.state, None)?;
    let mut resumed = losses(&first.log);
    resumed.extend(losses(&rest.log));
    ensure(resumed == losses(&a.log) && states_bit_equal(&rest.state, &a.state), "resumed run diverges")?;
    Ok(format!(
        "two seeded runs identical over {} episodes; checkpoint bit-exact; resume at 6 matches",
        a.log.len()
    ))
}

/// Writes past the test harness's output capture so the report shows even
/// when every check passes.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check + '_>)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("shape law", Box::new(shape_law)),
        ("projection properties", Box::new(projection_properties)),
        ("standardization", Box::new(standardization)),
        ("kNN oracle equivalence", Box::new(knn_equivalence)),
        ("image/class similarity oracle", Box::new(similarity_equivalence)),
        ("learning smoke test", Box::new(|| learning_smoke(root))),
        ("ablation harness", Box::new(|| ablation_harness(root))),
        ("optimizer and statistics", Box::new(optimizer_and_statistics)),
        ("determinism and persistence", Box::new(|| determinism_and_persistence(root))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => report(&format!("PASS {n:>2} {name}: {detail}")),
            Err(detail) => {
                report(&format!("FAIL {n:>2} {name}: {detail}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
