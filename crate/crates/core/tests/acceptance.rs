//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line regardless of output capture.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use moduleport::parallel::threads_from_env;
use moduleport::toy::{
    build_pair, run_experiment, ExperimentConfig, ExperimentReport, Mode, ModelSpec, TaskKind, TaskSpec, ToyModel,
    ToyTask,
};
use moduleport::{
    align_layer, brute_force_lsa, pearson_correlation, plan_layers, read_container, solve_lsa, transfer,
    write_container, AdapterParams, DType, Error, LayerModules, LayerStrategy, LoraParams, Matrix, PeftKind,
    PeftModuleSet, SampleBatch, SamplePair,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

fn lsa_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..500 {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(rows..=7);
        let cost = uniform(rows, cols, &mut rng);
        let fast = solve_lsa(&cost).map_err(|e| e.to_string())?;
        let slow = brute_force_lsa(&cost).map_err(|e| e.to_string())?;
        let (a, b) = (fast.selected_sum(&cost), slow.selected_sum(&cost));
        check(a == b, format!("case {case} ({rows}x{cols}): solver cost {a:e}, brute force {b:e}"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!("500/500 optimal costs equal, {elapsed:.2?}"))
}

fn permutation_recovery() -> Outcome {
    let start = Instant::now();
    let (n, d) = (1000, 32);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut correct = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let xs = Matrix::random_normal(n, d, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        let mut xt = Matrix::zeros(n, d);
        for r in 0..n {
            for i in 0..d {
                xt.set(r, perm[i], xs.get(r, i) + noise.sample(&mut rng));
            }
        }
        let sol = align_layer(&xs, &xt).map_err(|e| e.to_string())?;
        correct += sol.mapping().iter().zip(&perm).filter(|(a, b)| a == b).count();
    }
    let elapsed = start.elapsed();
    let frac = correct as f64 / (20 * d) as f64;
    check(frac >= 0.99, format!("recovered {frac:.4} of indices"))?;
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!("recovered {correct}/{} indices, {elapsed:.2?}", 20 * d))
}

/// Direct textbook evaluation, one pair of columns at a time.
fn definitional_pearson(xs: &Matrix, xt: &Matrix) -> Matrix {
    let n = xs.rows() as f64;
    Matrix::from_fn(xs.cols(), xt.cols(), |i, j| {
        let a = xs.column(i);
        let b = xt.column(j);
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    })
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pearson_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let xs = Matrix::random_normal(64, 16, 1.0, &mut rng);
        let mut xt = Matrix::random_normal(64, 24, 1.0, &mut rng);
        // Mix in shared structure so correlations are not all near zero.
        for r in 0..64 {
            for j in 0..16 {
                xt.set(r, j, xt.get(r, j) + 2.0 * xs.get(r, j));
            }
        }
        let c = pearson_correlation(&xs, &xt).map_err(|e| e.to_string())?;
        let err = max_abs_diff(&c, &definitional_pearson(&xs, &xt));
        check(err <= 1e-12, format!("seed {seed}: definitional mismatch {err:e}"))?;

        let scales: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..10.0)).collect();
        let shifts: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let affine = Matrix::from_fn(64, 16, |r, j| scales[j] * xs.get(r, j) + shifts[j]);
        let err_affine = max_abs_diff(&c, &pearson_correlation(&affine, &xt).map_err(|e| e.to_string())?);
        check(err_affine <= 1e-12, format!("seed {seed}: affine invariance off by {err_affine:e}"))?;

        let swapped = pearson_correlation(&xt, &xs).map_err(|e| e.to_string())?;
        let err_t = max_abs_diff(&c, &swapped.transpose());
        check(err_t <= 1e-12, format!("seed {seed}: transpose symmetry off by {err_t:e}"))?;
        worst = worst.max(err).max(err_affine).max(err_t);
    }
    Ok(format!("20 seeds of 64x16 vs 64x24, worst deviation {worst:e}"))
}

fn random_adapters(layers: usize, d: usize, bottleneck: usize, seed: u64) -> PeftModuleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PeftModuleSet::fresh_adapters(layers, d, bottleneck, &mut rng).unwrap();
    for (_, p) in set.named_params_mut() {
        p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    set
}

fn random_lora(layers: usize, d: usize, rank: usize, seed: u64) -> PeftModuleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PeftModuleSet::fresh_lora(layers, d, rank, 1.0, &mut rng).unwrap();
    for (_, p) in set.named_params_mut() {
        p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    set
}

fn identity_transfer() -> Outcome {
    for (name, teacher) in [("adapter", random_adapters(4, 16, 6, 1)), ("lora", random_lora(4, 16, 3, 2))] {
        for strategy in [LayerStrategy::Skip, LayerStrategy::Avg] {
            let plan = plan_layers(4, 4, strategy, 0).map_err(|e| e.to_string())?;
            let out = transfer(&teacher, &plan, None, 16).map_err(|e| e.to_string())?;
            check(out == teacher, format!("{name} {strategy} identity transfer changed values"))?;
        }
    }
    let teacher = random_adapters(12, 8, 4, 3);
    for offset in [0, 1] {
        let plan = plan_layers(12, 6, LayerStrategy::Skip, offset).map_err(|e| e.to_string())?;
        let out = transfer(&teacher, &plan, None, 8).map_err(|e| e.to_string())?;
        check(out.num_layers() == 6, "SKIP 12->6 did not give 6 layers")?;
        for l in 0..6 {
            check(
                out.layer(l) == teacher.layer(2 * l + offset),
                format!("offset {offset}: student layer {l} is not teacher layer {}", 2 * l + offset),
            )?;
        }
    }
    Ok("identity plans are bit-equal; SKIP 12->6 picks layers 2l+offset for offsets 0 and 1".into())
}

fn shape_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let xs = Matrix::random_normal(n, 768, 1.0, &mut rng);
    let xt = Matrix::random_normal(n, 1024, 1.0, &mut rng);
    let plan = plan_layers(1, 1, LayerStrategy::Skip, 0).map_err(|e| e.to_string())?;
    let batch = SampleBatch::new(plan.clone(), vec![SamplePair { student: xs, teacher: xt }]).map_err(|e| e.to_string())?;

    let adapter = PeftModuleSet::new(vec![LayerModules::Adapter(AdapterParams::fresh(1024, &mut rng))]).unwrap();
    let a_shapes = match adapter.layer(0) {
        LayerModules::Adapter(a) => (a.down_weight.shape(), a.up_weight.shape(), a.up_bias.len()),
        _ => unreachable!(),
    };
    check(a_shapes == ((96, 1024), (1024, 96), 1024), format!("teacher adapter shapes {a_shapes:?}"))?;
    let out = transfer(&adapter, &plan, Some(&batch), 768).map_err(|e| e.to_string())?;
    let LayerModules::Adapter(a) = out.layer(0) else { return Err("kind changed".into()) };
    let got = (a.down_weight.shape(), a.up_weight.shape(), a.up_bias.len(), a.down_bias.len());
    check(got == ((96, 768), (768, 96), 768, 96), format!("aligned adapter shapes {got:?}"))?;

    let lora = PeftModuleSet::new(vec![LayerModules::Lora {
        query: LoraParams::fresh(1024, &mut rng),
        value: LoraParams::fresh(1024, &mut rng),
    }])
    .unwrap();
    let out = transfer(&lora, &plan, Some(&batch), 768).map_err(|e| e.to_string())?;
    let LayerModules::Lora { query, value } = out.layer(0) else { return Err("kind changed".into()) };
    for p in [query, value] {
        let got = (p.a_weight.shape(), p.b_weight.shape());
        check(got == ((8, 768), (768, 8)), format!("aligned LoRA shapes {got:?}"))?;
    }
    Ok("adapter (96x1024, 1024x96, 1024) -> (96x768, 768x96, 768); LoRA (8x1024, 1024x8) -> (8x768, 768x8)".into())
}

fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn gradient_check() -> Outcome {
    const COORDS: usize = 20;
    const EPS: f64 = 1e-5;
    let task = ToyTask::generate(TaskSpec {
        kind: TaskKind::Nonlinear,
        input_dim: 6,
        seq_len: 4,
        n_classes: 4,
        n_train: 64,
        n_val: 8,
        seed: 3,
    })
    .map_err(|e| e.to_string())?;
    let (tokens, labels) = task.train().batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut checked = Vec::new();
    for kind in [PeftKind::Adapter, PeftKind::Lora] {
        let spec = ModelSpec { input_dim: 6, d_model: 10, depth: 2, n_classes: 4, seq_len: 4, kind, inner_dim: 5, lora_scaling: 0.5 };
        let mut model = ToyModel::random(&spec, 9).map_err(|e| e.to_string())?;
        let noise = Normal::new(0.0, 0.5).unwrap();
        for (_, p) in model.trainable_params_mut() {
            p.iter_mut().for_each(|v| *v = noise.sample(&mut rng));
        }
        let (_, grads) = model.loss_and_gradients(&tokens, &labels).map_err(|e| e.to_string())?;
        let named: Vec<(String, Vec<f64>)> = grads.named().into_iter().map(|(n, v)| (n, v.to_vec())).collect();

        let groups: Vec<(&str, fn(&str) -> bool)> = match kind {
            PeftKind::Adapter => vec![("adapters", |n| n.contains("/adapter/")), ("head", |n| n.starts_with("head/"))],
            PeftKind::Lora => vec![
                ("LoRA A", |n| n.ends_with("lora_A")),
                ("LoRA B", |n| n.ends_with("lora_B")),
                ("head", |n| n.starts_with("head/")),
            ],
        };
        for (group, member) in groups {
            let coords: Vec<(usize, usize)> = named
                .iter()
                .enumerate()
                .filter(|(_, (n, _))| member(n))
                .flat_map(|(k, (_, v))| (0..v.len()).map(move |i| (k, i)))
                .collect();
            for &(k, i) in coords.choose_multiple(&mut rng, COORDS) {
                let mut plus = model.clone();
                plus.trainable_params_mut()[k].1[i] += EPS;
                let mut minus = model.clone();
                minus.trainable_params_mut()[k].1[i] -= EPS;
                let lp = plus.loss(&tokens, &labels).map_err(|e| e.to_string())?;
                let lm = minus.loss(&tokens, &labels).map_err(|e| e.to_string())?;
                let numeric = (lp - lm) / (2.0 * EPS);
                let err = rel_error(named[k].1[i], numeric);
                check(
                    err < 1e-5,
                    format!("{kind} {}[{i}]: analytic {:e}, numeric {numeric:e}, rel {err:e}", named[k].0, named[k].1[i]),
                )?;
                worst = worst.max(err);
            }
            checked.push(format!("{kind}/{group}"));
        }
    }
    Ok(format!("{COORDS} coordinates each in {}, worst relative error {worst:e}", checked.join(", ")))
}

fn small_experiment(mode: Mode, peft: PeftKind) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        peft,
        n_train: 512,
        n_val: 256,
        teacher_epochs: 2,
        student_epochs: 1,
        num_samples: 256,
        num_seeds: 2,
        ..ExperimentConfig::for_mode(mode)
    }
}

fn determinism() -> Outcome {
    for (mode, peft) in [(Mode::Matching, PeftKind::Adapter), (Mode::Incompatible, PeftKind::Lora)] {
        let config = small_experiment(mode, peft);
        let a = run_experiment(&config, 1).map_err(|e| e.to_string())?.to_json();
        let b = run_experiment(&config, 1).map_err(|e| e.to_string())?.to_json();
        check(a == b, format!("{mode}/{peft} reports differ"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (teacher, _) = build_pair(&ExperimentConfig::for_mode(Mode::Incompatible), 1).map_err(|e| e.to_string())?;
    let containers = [
        teacher.to_container().map_err(|e| e.to_string())?,
        random_adapters(3, 12, 4, 8).to_container(DType::F32).map_err(|e| e.to_string())?,
        random_lora(2, 12, 3, 9).to_container(DType::F64).map_err(|e| e.to_string())?,
    ];
    for (k, c) in containers.iter().enumerate() {
        let first = dir.path().join(format!("{k}.a"));
        let second = dir.path().join(format!("{k}.b"));
        write_container(c, &first).map_err(|e| e.to_string())?;
        write_container(&read_container(&first).map_err(|e| e.to_string())?, &second).map_err(|e| e.to_string())?;
        let (x, y) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        check(x == y, format!("container {k}: write-read-write changed bytes"))?;
    }
    Ok("experiment reports byte-identical across runs; 3 containers stable under write-read-write".into())
}

fn direction_line(report: &ExperimentReport) -> String {
    report
        .summary
        .strategies
        .iter()
        .map(|s| {
            format!(
                "{}: lower step-0 loss {}/{}, mean val delta {:+.4}",
                s.strategy, s.initial_loss_wins, s.seeds, s.mean_delta_val_accuracy
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn direction_of_effect(threads: usize) -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::for_mode(Mode::Matching);
    check(
        (config.teacher_layers, config.student_layers, config.d_student(), config.num_seeds) == (4, 2, 32, 10),
        "default matching config drifted from depth 4->2, d=32, 10 seeds",
    )?;
    let report = run_experiment(&config, threads).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let line = direction_line(&report);
    for s in &report.summary.strategies {
        check(s.initial_loss_wins >= 8, format!("{line} ({}: fewer than 8/10 wins)", s.strategy))?;
        check(s.mean_delta_val_accuracy >= 0.0, format!("{line} ({}: negative mean delta)", s.strategy))?;
    }
    within(elapsed, Duration::from_secs(300))?;

    let incompatible = run_experiment(&ExperimentConfig::for_mode(Mode::Incompatible), threads).map_err(|e| e.to_string())?;
    Ok(format!(
        "matching {line}, {elapsed:.1?}; incompatible (reported only) {}",
        direction_line(&incompatible)
    ))
}

fn degenerate_handling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, ds, dt) = (80, 6, 9);
    let mut xs = Matrix::random_normal(n, ds, 1.0, &mut rng);
    let mut xt = Matrix::random_normal(n, dt, 1.0, &mut rng);
    for r in 0..n {
        xs.set(r, 1, 3.0);
        xs.set(r, 4, 0.0);
        xt.set(r, 0, -2.5);
        xt.set(r, 7, 0.0);
    }
    let c = pearson_correlation(&xs, &xt).map_err(|e| e.to_string())?;
    check(c.data().iter().all(|v| v.is_finite()), "correlation contains NaN or infinity")?;
    for j in 0..dt {
        check(c.get(1, j) == 0.0 && c.get(4, j) == 0.0, format!("dead student column has nonzero correlation at {j}"))?;
    }
    for i in 0..ds {
        check(c.get(i, 0) == 0.0 && c.get(i, 7) == 0.0, format!("dead teacher column has nonzero correlation at {i}"))?;
    }

    let plan = plan_layers(2, 1, LayerStrategy::Avg, 0).map_err(|e| e.to_string())?;
    let batch = SampleBatch::new(plan.clone(), vec![SamplePair { student: xs.clone(), teacher: xt.clone() }])
        .map_err(|e| e.to_string())?;
    for teacher in [random_adapters(2, dt, 4, 12), random_lora(2, dt, 3, 13)] {
        let out = transfer(&teacher, &plan, Some(&batch), ds).map_err(|e| e.to_string())?;
        let finite = out.named_params().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()));
        check(finite, "transferred modules contain non-finite values")?;
    }
    let report = moduleport::alignment_report(&batch).map_err(|e| e.to_string())?;
    check(!report.to_json().contains("null") && !report.to_json().contains("NaN"), "report has NaN")?;

    let wide = align_layer(&xt, &xs);
    check(
        matches!(wide, Err(Error::StudentWiderThanTeacher { student: 9, teacher: 6 })),
        format!("student wider than teacher gave {wide:?}"),
    )?;
    let wide_batch = SampleBatch::new(plan, vec![SamplePair { student: xt, teacher: xs }]);
    check(matches!(wide_batch, Err(Error::StudentWiderThanTeacher { .. })), "sample batch accepted a wider student")?;
    Ok("constant columns give exact zeros, pipeline output finite, wider student -> StudentWiderThanTeacher".into())
}

fn main() -> ExitCode {
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 LSA oracle equivalence", Box::new(lsa_oracle)),
        ("2 permutation recovery", Box::new(permutation_recovery)),
        ("3 Pearson correctness", Box::new(pearson_correctness)),
        ("4 identity transfer", Box::new(identity_transfer)),
        ("5 shape contract", Box::new(shape_contract)),
        ("6 gradient check", Box::new(gradient_check)),
        ("7 determinism", Box::new(determinism)),
        ("8 direction of effect", Box::new(move || direction_of_effect(threads))),
        ("9 degenerate handling", Box::new(degenerate_handling)),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
