//! Adversarial, cycle and balanced objectives.
//!
//! Discriminator outputs are raw logits; every sigmoid and log lives here.
//! Log terms use `log(max(p, 1e-12))` so they stay finite for any finite logit.
//! All discriminator losses are stored in minimization form: for the log
//! family a thread's stored loss is `-(mean log s(real) + mean log(1 - s(fake)))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::DiscriminatorNet;
use crate::params::Bound;
use crate::scalar::Scalar;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Log loss for D, non-saturating `-log s(D(fake))` for the generator.
    #[default]
    NonsaturatingLog,
    /// Squared error against targets 1 (real) and 0 (fake).
    LeastSquares,
}

/// Losses of one multi-thread discriminator on one real/fake pair of batches.
#[derive(Clone, Debug)]
pub struct AdvLossBundle {
    /// Mean of `per_thread_d_losses`.
    pub d_loss: Var,
    /// Generator adversarial term averaged over threads.
    pub g_loss: Var,
    pub per_thread_d_losses: Vec<Var>,
    pub per_thread_g_losses: Vec<Var>,
}

fn log_sigmoid<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let p = tape.sigmoid(z)?;
    let p = tape.clamp_min(p, LOG_FLOOR)?;
    tape.log(p)
}

fn log_one_minus_sigmoid<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let p = tape.sigmoid(z)?;
    let q = tape.neg(p)?;
    let q = tape.add_scalar(q, 1.0)?;
    let q = tape.clamp_min(q, LOG_FLOOR)?;
    tape.log(q)
}

/// One thread's discriminator loss (minimization form).
pub fn thread_d_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, form: LossForm) -> Result<Var> {
    match form {
        LossForm::NonsaturatingLog => {
            let lr = log_sigmoid(tape, real)?;
            let lr = tape.mean(lr)?;
            let lf = log_one_minus_sigmoid(tape, fake)?;
            let lf = tape.mean(lf)?;
            let objective = tape.add(lr, lf)?;
            tape.neg(objective)
        }
        LossForm::LeastSquares => {
            let r = tape.add_scalar(real, -1.0)?;
            let r = tape.square(r)?;
            let r = tape.mean(r)?;
            let f = tape.square(fake)?;
            let f = tape.mean(f)?;
            tape.add(r, f)
        }
    }
}

/// One thread's generator adversarial term.
pub fn thread_g_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var, form: LossForm) -> Result<Var> {
    match form {
        LossForm::NonsaturatingLog => {
            let l = log_sigmoid(tape, fake)?;
            let l = tape.mean(l)?;
            tape.neg(l)
        }
        LossForm::LeastSquares => {
            let f = tape.add_scalar(fake, -1.0)?;
            let f = tape.square(f)?;
            tape.mean(f)
        }
    }
}

/// Discriminator-side terms only: one loss per thread.
pub fn thread_d_losses<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var], form: LossForm) -> Result<Vec<Var>> {
    check_threads(real.len(), fake.len())?;
    real.iter().zip(fake).map(|(&r, &f)| thread_d_loss(tape, r, f, form)).collect()
}

/// Generator-side term: thread losses averaged.
pub fn averaged_g_loss<T: Scalar>(tape: &mut Tape<T>, fake: &[Var], form: LossForm) -> Result<(Var, Vec<Var>)> {
    let per: Vec<Var> = fake.iter().map(|&f| thread_g_loss(tape, f, form)).collect::<Result<_>>()?;
    Ok((tape.mean_of(&per)?, per))
}

fn check_threads(real: usize, fake: usize) -> Result<()> {
    if real != fake || real == 0 {
        return Err(Error::shape("adversarial loss", "thread count", real, fake));
    }
    Ok(())
}

/// Bundle from per-thread logit maps. With one thread the averages are the
/// thread's own nodes.
pub fn adversarial_bundle<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var], form: LossForm) -> Result<AdvLossBundle> {
    let per_thread_d_losses = thread_d_losses(tape, real, fake, form)?;
    let d_loss = tape.mean_of(&per_thread_d_losses)?;
    let (g_loss, per_thread_g_losses) = averaged_g_loss(tape, fake, form)?;
    Ok(AdvLossBundle { d_loss, g_loss, per_thread_d_losses, per_thread_g_losses })
}

/// Whole-image adversarial losses of `d_g`.
pub fn adv_loss_global<T: Scalar>(
    tape: &mut Tape<T>,
    d_g: &DiscriminatorNet<T>,
    bound: &Bound,
    real: Var,
    fake: Var,
    form: LossForm,
) -> Result<AdvLossBundle> {
    let (rs, fs) = (tape.shape(real).to_vec(), tape.shape(fake).to_vec());
    if rs.len() != 4 || fs.len() != 4 || rs[1..] != fs[1..] {
        return Err(Error::shape("adv_loss_global", "real vs fake sample shape", format!("{rs:?}"), format!("{fs:?}")));
    }
    let r = d_g.forward_threads(tape, bound, real)?;
    let f = d_g.forward_threads(tape, bound, fake)?;
    adversarial_bundle(tape, &r, &f, form)
}

/// Crop-level adversarial losses of `d_p`. Both crop batches must be
/// `part_size x part_size`.
pub fn adv_loss_part<T: Scalar>(
    tape: &mut Tape<T>,
    d_p: &DiscriminatorNet<T>,
    bound: &Bound,
    real_crops: Var,
    fake_crops: Var,
    part_size: usize,
    form: LossForm,
) -> Result<AdvLossBundle> {
    for (which, v) in [("real crops", real_crops), ("fake crops", fake_crops)] {
        let s = tape.shape(v);
        if s.len() != 4 || s[2] != part_size || s[3] != part_size {
            return Err(Error::shape("adv_loss_part", which, format!("[_, 3, {part_size}, {part_size}]"), format!("{s:?}")));
        }
    }
    let r = d_p.forward_threads(tape, bound, real_crops)?;
    let f = d_p.forward_threads(tape, bound, fake_crops)?;
    adversarial_bundle(tape, &r, &f, form)
}

/// Mean absolute reconstruction error.
pub fn cycle_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, reconstructed: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(reconstructed) {
        return Err(Error::shape(
            "cycle_loss",
            "reconstruction shape",
            format!("{:?}", tape.shape(x)),
            format!("{:?}", tape.shape(reconstructed)),
        ));
    }
    let d = tape.sub(reconstructed, x)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    /// Weight of every target-side adversarial term, for D and G alike.
    pub alpha: f64,
    pub cycle_weight: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { alpha: 0.1, cycle_weight: 10.0 }
    }
}

#[derive(Clone, Debug)]
pub struct BalancedTotal {
    pub total_g: Var,
    /// Per discriminator (target side in input order, then source), the
    /// scaled per-thread losses each thread is updated from.
    pub d_updates: Vec<Vec<Var>>,
}

/// Generator side of the balanced objective from already averaged terms:
/// `alpha * sum(target_g) + source_g + cycle_weight * sum(cycle_terms)`.
pub fn generator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    target_g: &[Var],
    source_g: Var,
    cycle_terms: &[Var],
    cfg: &BalanceConfig,
) -> Result<Var> {
    let mut total = source_g;
    if !target_g.is_empty() {
        let t = tape.add_all(target_g)?;
        let t = tape.scale(t, cfg.alpha)?;
        total = tape.add(t, total)?;
    }
    if !cycle_terms.is_empty() {
        let c = tape.add_all(cycle_terms)?;
        let c = tape.scale(c, cfg.cycle_weight)?;
        total = tape.add(total, c)?;
    }
    Ok(total)
}

/// `alpha * (sum of target-side terms) + source-side term + cycle_weight * sum(cycle)`.
///
/// Target-side bundles (global and part) contribute with equal weight.
pub fn balanced_total<T: Scalar>(
    tape: &mut Tape<T>,
    target_side: &[&AdvLossBundle],
    source_side: &AdvLossBundle,
    cycle_terms: &[Var],
    cfg: &BalanceConfig,
) -> Result<BalancedTotal> {
    let mut d_updates = Vec::with_capacity(target_side.len() + 1);
    for b in target_side {
        let scaled = b.per_thread_d_losses.iter().map(|&l| tape.scale(l, cfg.alpha)).collect::<Result<Vec<_>>>()?;
        d_updates.push(scaled);
    }
    d_updates.push(source_side.per_thread_d_losses.clone());

    let target_g: Vec<Var> = target_side.iter().map(|b| b.g_loss).collect();
    let total = generator_objective(tape, &target_g, source_side.g_loss, cycle_terms, cfg)?;
    Ok(BalancedTotal { total_g: total, d_updates })
}
