//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
    /// (input index, flat index) of the worst entry.
    pub worst: (usize, usize),
    /// Entries whose `x - h .. x + h` stencil crosses a kink; excluded,
    /// since the function has no derivative to compare against there.
    pub skipped_at_kinks: usize,
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(T, Tape<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss { shape });
    }
    Ok((tape.value(out).item(), tape, vars, out))
}

/// Compares the tape gradient of scalar `f` at `point` against
/// `(f(x+h) - f(x-h)) / 2h`, elementwise.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let wrapped = |tape: &mut Tape<T>, vars: &[Var]| f(tape, vars[0]);
    Ok(grad_check_many(wrapped, std::slice::from_ref(point), h, None, 0)?.max_relative_error)
}

/// Multi-input variant. With `max_per_input = Some(k)`, checks a seeded
/// random subset of at most `k` entries of each input.
pub fn grad_check_many<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: f64,
    max_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, tape, vars, out) = eval(&f, inputs)?;
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        entries_checked: 0,
        worst: (0, 0),
        skipped_at_kinks: 0,
    };
    let mut perturbed: Vec<Tensor<T>> = inputs.to_vec();
    for (which, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("leaf requires grad");
        let n = inputs[which].numel();
        let mut idx: Vec<usize> = match max_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        idx.sort_unstable();
        for i in idx {
            let orig = inputs[which].data()[i];
            perturbed[which].data_mut()[i] = orig + T::lit(h);
            let (plus, plus_tape, ..) = eval(&f, &perturbed)?;
            perturbed[which].data_mut()[i] = orig - T::lit(h);
            let (minus, minus_tape, ..) = eval(&f, &perturbed)?;
            perturbed[which].data_mut()[i] = orig;
            if plus_tape.kink_pattern() != minus_tape.kink_pattern() {
                report.skipped_at_kinks += 1;
                continue;
            }
            let (plus, minus) = (plus.as_f64(), minus.as_f64());
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i].as_f64(), numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = (which, i);
            }
        }
    }
    Ok(report)
}

/// Pass threshold and finite-difference step of [`run_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-3;
pub const SUITE_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_relative_error: f64,
    pub entries_checked: usize,
    pub skipped_at_kinks: usize,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values at least `margin` away from zero, so kinks are never straddled.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// `sum(v * w)` with a fixed random `w`, so every output entry gets a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, tape.shape(v), -1.0, 1.0));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn composite_inputs(seed: u64) -> Result<(crate::trainer::Nets<f64>, Vec<Tensor<f64>>)> {
    use crate::trainer::{Nets, TrainingConfig};
    let cfg = TrainingConfig {
        g_base_width: 4,
        g_res_blocks: 1,
        d_base_width: 4,
        n_threads: 2,
        d_global_depth: 2,
        d_part_depth: 2,
        image_size: 32,
        part_size: 8,
        seed,
        ..Default::default()
    };
    let nets = Nets::<f64>::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs = vec![uniform(&mut rng, &[1, 3, 16, 16], -1.0, 1.0), uniform(&mut rng, &[1, 3, 16, 16], -1.0, 1.0)];
    for store in [&nets.f.params, &nets.g.params, &nets.d_global.params, &nets.d_part.params, &nets.d_source.params] {
        // larger than the training init so activations sit well away from kinks
        inputs.extend(store.iter().map(|(_, t)| uniform(&mut rng, t.shape(), -0.3, 0.3)));
    }
    Ok((nets, inputs))
}

/// Generator objective plus every discriminator thread loss, on 16x16
/// inputs, as a function of the images and all five networks' parameters.
fn composite_loss(nets: &crate::trainer::Nets<f64>, tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
    use crate::losses::{averaged_g_loss, cycle_loss, generator_objective, thread_d_losses, BalanceConfig, LossForm};
    use crate::params::Bound;
    let (x, y) = (v[0], v[1]);
    let mut at = 2;
    let mut take = |n: usize| {
        let b = Bound::from_vars(v[at..at + n].to_vec());
        at += n;
        b
    };
    let bf = take(nets.f.params.len());
    let bg = take(nets.g.params.len());
    let bd: Vec<Bound> = [&nets.d_global, &nets.d_part, &nets.d_source].iter().map(|d| take(d.params.len())).collect();
    let form = LossForm::NonsaturatingLog;
    let fx = nets.f.forward(tape, &bf, x)?;
    let gfx = nets.g.forward(tape, &bg, fx)?;
    let gy = nets.g.forward(tape, &bg, y)?;
    let fgy = nets.f.forward(tape, &bf, gy)?;
    let ry = tape.crop_each(y, &[(3, 5)], 8)?;
    let rf = tape.crop_each(fx, &[(8, 1)], 8)?;
    let mut g_terms = Vec::new();
    let mut d_terms = Vec::new();
    for (i, (net, real, fake)) in [(&nets.d_global, y, fx), (&nets.d_part, ry, rf), (&nets.d_source, x, gy)].into_iter().enumerate() {
        let r = net.forward_threads(tape, &bd[i], real)?;
        let f = net.forward_threads(tape, &bd[i], fake)?;
        d_terms.extend(thread_d_losses(tape, &r, &f, form)?);
        g_terms.push(averaged_g_loss(tape, &f, form)?.0);
    }
    let cx = cycle_loss(tape, x, gfx)?;
    let cy = cycle_loss(tape, y, fgy)?;
    let g = generator_objective(tape, &g_terms[..2], g_terms[2], &[cx, cy], &BalanceConfig::default())?;
    let d = tape.add_all(&d_terms)?;
    tape.add(g, d)
}

/// Finite-difference check of every differentiable tape operation and of
/// the composite generator + discriminator loss, in f64.
pub fn run_suite(seed: u64) -> Result<Vec<OpCheck>> {
    use crate::autodiff::{ConvSpec, Unary};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let mut out = Vec::new();
    let mut record = |op: &'static str, r: GradCheckReport| {
        // a check that skipped most of its entries proves nothing
        let covered = r.entries_checked >= 4 * r.skipped_at_kinks;
        out.push(OpCheck {
            op,
            max_relative_error: r.max_relative_error,
            entries_checked: r.entries_checked,
            skipped_at_kinks: r.skipped_at_kinks,
            passed: r.max_relative_error < SUITE_TOLERANCE && covered,
        });
    };
    let unary: [(&'static str, Unary, Tensor<f64>); 11] = [
        ("leaky_relu", Unary::LeakyRelu(0.2), off_kink(&mut rng, &shape, 0.05)),
        ("relu", Unary::Relu, off_kink(&mut rng, &shape, 0.05)),
        ("tanh", Unary::Tanh, uniform(&mut rng, &shape, -2.0, 2.0)),
        ("sigmoid", Unary::Sigmoid, uniform(&mut rng, &shape, -3.0, 3.0)),
        ("log", Unary::Log, uniform(&mut rng, &shape, 0.2, 2.0)),
        ("neg", Unary::Neg, uniform(&mut rng, &shape, -1.0, 1.0)),
        ("abs", Unary::Abs, off_kink(&mut rng, &shape, 0.05)),
        ("square", Unary::Square, uniform(&mut rng, &shape, -1.0, 1.0)),
        ("scale", Unary::Scale(-0.7), uniform(&mut rng, &shape, -1.0, 1.0)),
        ("add_scalar", Unary::AddScalar(0.3), uniform(&mut rng, &shape, -1.0, 1.0)),
        ("clamp_min", Unary::ClampMin(0.0), off_kink(&mut rng, &shape, 0.05)),
    ];
    for (i, (op, kind, x)) in unary.into_iter().enumerate() {
        let s = seed + i as u64;
        record(op, grad_check_many(|t, v| {
            let y = t.unary(v[0], kind)?;
            weighted_sum(t, y, s)
        }, &[x], SUITE_STEP, None, s)?);
    }
    let pair = [uniform(&mut rng, &shape, -1.0, 1.0), uniform(&mut rng, &shape, -1.0, 1.0)];
    for (op, k) in [("add", 0), ("sub", 1), ("mul", 2)] {
        record(op, grad_check_many(|t, v| {
            let y = match k {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weighted_sum(t, y, seed)
        }, &pair, SUITE_STEP, None, seed)?);
    }
    let x = uniform(&mut rng, &shape, -1.0, 1.0);
    record("mean", grad_check_many(|t, v| {
        let w = weighted_sum(t, v[0], seed)?;
        let m = t.mean(v[0])?;
        let m = t.square(m)?;
        t.add(w, m)
    }, std::slice::from_ref(&x), SUITE_STEP, None, seed)?);
    record("sum", grad_check_many(|t, v| {
        let s = t.sum(v[0])?;
        t.square(s)
    }, std::slice::from_ref(&x), SUITE_STEP, None, seed)?);

    let conv_in = [uniform(&mut rng, &[2, 4, 7, 7], -1.0, 1.0), uniform(&mut rng, &[6, 2, 3, 3], -0.5, 0.5), uniform(&mut rng, &[6], -0.5, 0.5)];
    record("conv2d", grad_check_many(|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1, 2))?;
        weighted_sum(t, y, seed)
    }, &conv_in, SUITE_STEP, None, seed)?);
    let convt_in = [uniform(&mut rng, &[2, 4, 4, 4], -1.0, 1.0), uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5), uniform(&mut rng, &[3], -0.5, 0.5)];
    record("conv_transpose2d", grad_check_many(|t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
        weighted_sum(t, y, seed)
    }, &convt_in, SUITE_STEP, None, seed)?);
    record("instance_norm", grad_check_many(|t, v| {
        let y = t.instance_norm(v[0], 1e-5)?;
        weighted_sum(t, y, seed)
    }, std::slice::from_ref(&x), SUITE_STEP, None, seed)?);
    record("slice", grad_check_many(|t, v| {
        let y = t.slice4(v[0], [(1, 1), (0, 2), (1, 3), (2, 2)])?;
        weighted_sum(t, y, seed)
    }, std::slice::from_ref(&x), SUITE_STEP, None, seed)?);
    record("crop_each", grad_check_many(|t, v| {
        let y = t.crop_each(v[0], &[(0, 1), (2, 0)], 2)?;
        weighted_sum(t, y, seed)
    }, std::slice::from_ref(&x), SUITE_STEP, None, seed)?);
    record("tile_channels", grad_check_many(|t, v| {
        let y = t.tile_channels(v[0], 3)?;
        weighted_sum(t, y, seed)
    }, std::slice::from_ref(&x), SUITE_STEP, None, seed)?);

    let (nets, inputs) = composite_inputs(seed)?;
    record("composite_model_loss", grad_check_many(|t, v| composite_loss(&nets, t, v), &inputs, SUITE_STEP, Some(6), seed)?);
    Ok(out)
}
