//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). `ACCEPTANCE_ONLY=1,4,8`
//! restricts the run to the listed criteria.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use maos_cli::{run_sweep, run_synth, run_train, RunConfig, RunReport, SweepAxis, COLLAPSE_FRACTION, DEFAULT_TEST_PAIRS};
use maos_core::autodiff::Tape;
use maos_core::data::synth::synth_corpus;
use maos_core::gradcheck::run_suite;
use maos_core::losses::{adv_loss_global, adv_loss_part, adversarial_bundle, balanced_total, thread_d_loss, thread_g_loss, BalanceConfig, LossForm};
use maos_core::metrics::{frechet_distance, ssim, GaussianStats, SSIM_K1};
use maos_core::model::{build_discriminator, DiscriminatorKind};
use maos_core::trainer::{StepControls, Trainer, TrainingConfig, TELEMETRY_FILE};
use maos_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const FRECHET_SELF_TOL: f64 = 1e-8;
const FRECHET_CLOSED_TOL: f64 = 1e-9;
const MONTE_CARLO_SAMPLES: usize = 100_000;
const MONTE_CARLO_REL_TOL: f64 = 0.02;
const SSIM_SYMMETRY_TOL: f64 = 1e-12;
const SSIM_CONSTANT_TOL: f64 = 1e-9;
const ALPHA_RATIO_TOL: f64 = 1e-9;
const TASK_SEEDS: [u64; 3] = [0, 1, 2];
const TASK_SOURCES: usize = 64;
const TASK_SIDE: usize = 32;
const TASK_BUDGET: Duration = Duration::from_secs(600);
const FID_RATIO_MAX: f64 = 0.5;
const SWEEP_ALPHAS: [&str; 3] = ["0.01", "0.1", "1.0"];
const SWEEP_ITERATIONS: u64 = 500;
const RESUME_SPLIT: u64 = 10;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let ops = run_suite(0).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let worst = ops.iter().map(|o| o.max_relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = ops.iter().filter(|o| !o.passed).map(|o| o.op).collect();
    let composite = ops.iter().any(|o| o.op == "composite_model_loss");
    check(
        failed.is_empty() && composite && elapsed < GRADCHECK_BUDGET,
        format!("{} ops, worst rel err {worst:.2e}, failed {failed:?}, {:.1}s", ops.len(), elapsed.as_secs_f64()),
    )
}

fn stats(mean: &[f64], var: &[f64]) -> GaussianStats {
    GaussianStats::from_parts(mean.to_vec(), DMatrix::from_diagonal(&DVector::from_row_slice(var)), 1000).unwrap()
}

fn frechet_oracle() -> Outcome {
    let fd = |a: &GaussianStats, b: &GaussianStats| frechet_distance(a, b).map_err(|e| e.to_string());
    let a = stats(&[0.3, -1.0], &[2.0, 0.5]);
    let same = fd(&a, &a)?;
    let one = fd(&stats(&[0.0], &[1.0]), &stats(&[3.0], &[4.0]))?;
    let two = fd(&stats(&[0.0, 0.0], &[1.0, 1.0]), &stats(&[1.0, 1.0], &[4.0, 9.0]))?;

    // diagonal Gaussians: |dmu|^2 + sum (sqrt a - sqrt b)^2
    let (m1, v1, m2, v2) = ([0.0, 1.0, -0.5], [1.0, 0.25, 2.0], [1.5, -0.5, 0.0], [2.0, 0.5, 1.0]);
    let draw = |m: &[f64], v: &[f64], seed: u64| -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..MONTE_CARLO_SAMPLES)
            .map(|_| {
                m.iter()
                    .zip(v)
                    .map(|(m, v)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + v.sqrt() * z
                    })
                    .collect()
            })
            .collect()
    };
    let fit = |s: &[Vec<f64>]| GaussianStats::fit(s).map_err(|e| e.to_string());
    let mc = fd(&fit(&draw(&m1, &v1, 1))?, &fit(&draw(&m2, &v2, 2))?)?;
    let want: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        + v1.iter().zip(&v2).map(|(a, b): (&f64, &f64)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
    let rel = (mc / want - 1.0).abs();
    check(
        same.abs() < FRECHET_SELF_TOL && (one - 10.0).abs() < FRECHET_CLOSED_TOL && (two - 7.0).abs() < FRECHET_CLOSED_TOL && rel < MONTE_CARLO_REL_TOL,
        format!("self {same:.1e}, 1-D {one}, 2-D {two}, Monte Carlo {mc:.4} vs {want:.4} ({:.2}%)", 100.0 * rel),
    )
}

fn ssim_oracle() -> Outcome {
    let noise = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::<f64>::from_fn([3, 32, 32], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.tanh()
        })
    };
    let s = |a: &Tensor<f64>, b: &Tensor<f64>| ssim(a, b).map_err(|e| e.to_string());
    let (a, b) = (noise(1), noise(2));
    let self_sim = s(&a, &a)?;
    let asym = (s(&a, &b)? - s(&b, &a)?).abs();
    // constant images: only the luminance term survives, range 1 after mapping to [0, 1]
    let (u, v) = (0.2, 0.7);
    let c1 = SSIM_K1 * SSIM_K1;
    let want = (2.0 * u * v + c1) / (u * u + v * v + c1);
    let got = s(&Tensor::full([3, 16, 16], 2.0 * u - 1.0), &Tensor::full([3, 16, 16], 2.0 * v - 1.0))?;
    check(
        self_sim == 1.0 && asym < SSIM_SYMMETRY_TOL && (got - want).abs() < SSIM_CONSTANT_TOL,
        format!("self {self_sim}, asymmetry {asym:.1e}, constant case {got:.12} vs {want:.12}"),
    )
}

fn ramp(shape: [usize; 4], mul: usize, modulus: usize) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * mul % modulus) as f64 / (modulus as f64 / 2.0)) - 1.0)
}

fn degeneracies() -> Outcome {
    let form = LossForm::NonsaturatingLog;
    let net = build_discriminator::<f64>(DiscriminatorKind::Global, 1, 8, 3, 7).map_err(|e| e.to_string())?;
    let mut tape = Tape::<f64>::new();
    let bound = net.params.bind(&mut tape, false);
    let real = tape.constant(ramp([2, 3, 16, 16], 37, 101));
    let fake = tape.constant(ramp([2, 3, 16, 16], 53, 97));
    let run = |tape: &mut Tape<f64>| -> maos_core::Result<_> {
        let r = net.forward_threads(tape, &bound, real)?;
        let f = net.forward_threads(tape, &bound, fake)?;
        let bundle = adversarial_bundle(tape, &r, &f, form)?;
        let d = thread_d_loss(tape, r[0], f[0], form)?;
        let g = thread_g_loss(tape, f[0], form)?;
        let single = tape.value(bundle.d_loss).item().to_bits() == tape.value(d).item().to_bits()
            && tape.value(bundle.g_loss).item().to_bits() == tape.value(g).item().to_bits();

        let global = adv_loss_global(tape, &net, &bound, real, fake, form)?;
        let rc = tape.crop_each(real, &[(0, 0), (0, 0)], 16)?;
        let fc = tape.crop_each(fake, &[(0, 0), (0, 0)], 16)?;
        let part = adv_loss_part(tape, &net, &bound, rc, fc, 16, form)?;
        let crop = tape.value(global.d_loss).item() == tape.value(part.d_loss).item() && tape.value(global.g_loss).item() == tape.value(part.g_loss).item();

        let cyc = tape.constant(Tensor::scalar(0.375));
        let unit = BalanceConfig { alpha: 1.0, cycle_weight: 1.0 };
        let total = balanced_total(tape, &[&global, &part], &bundle, &[cyc], &unit)?;
        let t = tape.add(global.g_loss, part.g_loss)?;
        let t = tape.add(t, bundle.g_loss)?;
        let plain = tape.add(t, cyc)?;
        let mut unweighted = tape.value(total.total_g).item() == tape.value(plain).item();
        for (scaled, b) in total.d_updates.iter().zip([&global, &part, &bundle]) {
            for (s, l) in scaled.iter().zip(&b.per_thread_d_losses) {
                unweighted &= tape.value(*s).item() == tape.value(*l).item();
            }
        }
        Ok((single, crop, unweighted))
    };
    let (single, crop, unweighted) = run(&mut tape).map_err(|e| e.to_string())?;

    let ds = synth_corpus::<f64>(4, TASK_SIDE, 3).map_err(|e| e.to_string())?.dataset;
    let step = |alpha: f64| -> maos_core::Result<_> {
        let mut tr = Trainer::<f64>::new(TrainingConfig { alpha, ..Default::default() }, ds.source_images.len())?;
        let r = tr.train_step(&ds)?;
        Ok((r.grad_norm_d_global, r.grad_norm_d_part))
    };
    let (a, b) = (step(0.1).map_err(|e| e.to_string())?, step(1.0).map_err(|e| e.to_string())?);
    let ratios = [a.0 / b.0, a.1 / b.1];
    let ratio_ok = ratios.iter().all(|r| (r - 0.1).abs() < ALPHA_RATIO_TOL);
    check(
        single && crop && unweighted && ratio_ok,
        format!("N=1 bitwise {single}, full crop = global {crop}, alpha=1 unweighted {unweighted}, step-1 ratios {:.12}/{:.12}", ratios[0], ratios[1]),
    )
}

fn thread_isolation() -> Outcome {
    let err = |e: maos_core::Error| e.to_string();
    let n = 4;
    let net = build_discriminator::<f64>(DiscriminatorKind::Global, n, 16, 4, 11).map_err(err)?;
    let mut leaked = 0usize;
    for i in 0..n {
        let mut tape = Tape::<f64>::new();
        let bound = net.params.bind(&mut tape, true);
        let x = tape.constant(ramp([2, 3, 32, 32], 29, 89));
        let scores = net.forward_threads(&mut tape, &bound, x).map_err(err)?;
        let s = tape.sum(scores[i]).map_err(err)?;
        let grads = tape.backward(s).map_err(err)?;
        for (name, _) in net.params.iter() {
            let id = net.params.id(name).unwrap();
            let g = grads.get(bound.var(id)).unwrap();
            for j in (0..n).filter(|&j| j != i) {
                leaked += g[net.thread_range(id, j)].iter().filter(|&&v| v != 0.0).count();
            }
        }
    }

    let ds = synth_corpus::<f64>(4, TASK_SIDE, 2).map_err(err)?.dataset;
    let cfg = TrainingConfig::default();
    let mut plain = Trainer::<f64>::new(cfg.clone(), 4).map_err(err)?;
    let mut muted = Trainer::<f64>::new(cfg.clone(), 4).map_err(err)?;
    plain.train_step(&ds).map_err(err)?;
    let controls = StepControls { zero_threads: vec![(DiscriminatorKind::Global, 1)], ..Default::default() };
    muted.train_step_with(&ds, &controls).map_err(err)?;
    let mut others_equal = true;
    let d = &plain.nets.d_global;
    for (name, t) in d.params.iter() {
        let id = d.params.id(name).unwrap();
        let other = muted.nets.d_global.params.by_name(name).unwrap();
        for thread in (0..cfg.n_threads).filter(|&t| t != 1) {
            let r = d.thread_range(id, thread);
            others_equal &= t.data()[r.clone()] == other.data()[r];
        }
    }

    let count = |threads| -> maos_core::Result<usize> {
        let mut total = 0;
        for kind in [DiscriminatorKind::Global, DiscriminatorKind::Part] {
            total += build_discriminator::<f64>(kind, threads, 16, kind.default_depth(), 0)?.params.num_elements();
        }
        Ok(total)
    };
    let (one, four) = (count(1).map_err(err)?, count(4).map_err(err)?);
    check(
        leaked == 0 && others_equal && four < one,
        format!("cross-thread nonzero grads {leaked}, other threads unchanged {others_equal}, params N=1 {one} > N=4 {four}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn train_task(root: &Path, seed: u64) -> Result<(RunReport, Duration), String> {
    let data = root.join(format!("corpus_{seed}"));
    run_synth(&data, TASK_SOURCES, TASK_SIDE, seed, DEFAULT_TEST_PAIRS).map_err(|e| e.to_string())?;
    let cfg = RunConfig { dataset: data, output_dir: root.join(format!("run_{seed}")), training: TrainingConfig { seed, ..Default::default() }, ..Default::default() };
    let t = Instant::now();
    let report = run_train(&cfg).map_err(|e| e.to_string())?.ok_or("no report")?;
    Ok((report, t.elapsed()))
}

fn one_shot_task(root: &Path) -> Outcome {
    let (mut ratios, mut margins, mut lines, mut slowest) = (Vec::new(), Vec::new(), Vec::new(), Duration::ZERO);
    for seed in TASK_SEEDS {
        let (r, took) = train_task(root, seed)?;
        let (t, u) = (r.translated.ok_or("no test split")?, r.untranslated.ok_or("no test split")?);
        let (st, su) = (t.ssim_mean.ok_or("no pairs")?, u.ssim_mean.ok_or("no pairs")?);
        ratios.push(t.fid / u.fid);
        margins.push(st - su);
        slowest = slowest.max(took);
        lines.push(format!("seed {seed}: fid {:.2}/{:.2}, ssim {st:.3}/{su:.3}, {:.0}s", t.fid, u.fid, took.as_secs_f64()));
    }
    let (ratio, margin) = (median(ratios), median(margins));
    let (a, b) = (ratio < FID_RATIO_MAX, margin > 0.0);
    check(
        a && b && slowest < TASK_BUDGET,
        format!("(a) median fid ratio {ratio:.3} {}; (b) median ssim gain {margin:+.3} {}; [{}]", pass(a), pass(b), lines.join("; ")),
    )
}

fn overfitting_diagnostic(root: &Path) -> Outcome {
    let data = root.join("corpus_sweep");
    run_synth(&data, TASK_SOURCES, TASK_SIDE, 0, DEFAULT_TEST_PAIRS).map_err(|e| e.to_string())?;
    let base = RunConfig {
        dataset: data,
        output_dir: root.join("alpha_sweep"),
        training: TrainingConfig { iterations: SWEEP_ITERATIONS, ..Default::default() },
        ..Default::default()
    };
    let values: Vec<String> = SWEEP_ALPHAS.iter().map(|s| s.to_string()).collect();
    let summary = run_sweep(&base, SweepAxis::Alpha, &values).map_err(|e| e.to_string())?;
    let mut flags_ok = true;
    let mut cells = Vec::new();
    let mut div_at_default = None;
    for row in &summary.rows {
        let r = row.outcome.as_ref().map_err(|e| format!("alpha {} failed: {e}", row.value))?;
        flags_ok &= r.collapse == (r.diversity < COLLAPSE_FRACTION * r.input_diversity);
        if row.value == "0.1" {
            div_at_default = Some(r.diversity);
        }
        cells.push(format!("alpha {}: diversity {:.4}{}", row.value, r.diversity, if r.collapse { " COLLAPSE" } else { "" }));
    }
    let csv_rows = summary.csv.lines().skip(1).filter(|l| l.contains(",ok,")).count();
    let div = div_at_default.ok_or("alpha 0.1 missing")?;
    check(
        csv_rows == SWEEP_ALPHAS.len() && flags_ok && div > 0.0,
        format!("{} ({csv_rows} csv rows, {SWEEP_ITERATIONS} iterations each)", cells.join(", ")),
    )
}

fn determinism(root: &Path) -> Outcome {
    let data = root.join("corpus_det");
    run_synth(&data, 16, TASK_SIDE, 5, 0).map_err(|e| e.to_string())?;
    let cfg = |name: &str, iterations| RunConfig {
        dataset: data.clone(),
        output_dir: root.join(name),
        training: TrainingConfig { iterations, seed: 5, ..Default::default() },
        evaluate: false,
        ..Default::default()
    };
    let total = 2 * RESUME_SPLIT;
    let read = |name: &str| std::fs::read_to_string(root.join(name).join(TELEMETRY_FILE)).map_err(|e| e.to_string());
    for name in ["det_a", "det_b"] {
        run_train(&cfg(name, total)).map_err(|e| e.to_string())?;
    }
    let (a, b) = (read("det_a")?, read("det_b")?);
    run_train(&cfg("det_half", RESUME_SPLIT)).map_err(|e| e.to_string())?;
    let ckpt = maos_core::trainer::checkpoint_name(RESUME_SPLIT);
    let ckpt = if root.join("det_half").join(&ckpt).exists() { ckpt } else { maos_core::trainer::FINAL_CHECKPOINT.to_string() };
    let resumed = RunConfig { resume: Some(root.join("det_half").join(ckpt)), ..cfg("det_resumed", total) };
    run_train(&resumed).map_err(|e| e.to_string())?;
    let tail = |s: &str| s.lines().skip(1).skip(RESUME_SPLIT as usize).map(str::to_string).collect::<Vec<_>>();
    let continued: Vec<String> = read("det_resumed")?.lines().skip(1).map(str::to_string).collect();
    let want = tail(&a);
    check(
        a == b && want.len() == RESUME_SPLIT as usize && continued == want,
        format!("telemetry identical {}, resumed rows {}/{} identical", a == b, continued.iter().zip(&want).filter(|(x, y)| x == y).count(), want.len()),
    )
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` forwards harness flags; ignore them
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let criteria: [(u32, &str, &dyn Fn() -> Outcome); 8] = [
        (1, "gradient integrity", &gradient_integrity),
        (2, "frechet oracle", &frechet_oracle),
        (3, "ssim oracle", &ssim_oracle),
        (4, "equation degeneracies", &degeneracies),
        (5, "thread isolation", &thread_isolation),
        (6, "one-shot synthetic task", &|| one_shot_task(root)),
        (7, "overfitting diagnostic", &|| overfitting_diagnostic(root)),
        (8, "determinism and persistence", &|| determinism(root)),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!("criterion {id} {}: {name} ({secs:.1}s) {detail}", pass(ok));
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
