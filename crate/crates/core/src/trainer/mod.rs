//! Alternating D-then-G training with per-thread discriminator updates,
//! checkpointing and telemetry.

mod adam;
mod checkpoint;
mod config;
mod telemetry;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, StoredTensor, TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainingConfig;
pub use telemetry::{telemetry_header, telemetry_row, TelemetryWriter};

use crate::autodiff::{Tape, Var};
use crate::data::{one_shot_batch, CropSpec, EpochSampler, OneShotDataset};
use crate::error::{Error, Result};
use crate::losses::{averaged_g_loss, cycle_loss, generator_objective, thread_d_losses};
use crate::model::{build_discriminator, build_generator, DiscriminatorKind, DiscriminatorNet, GeneratorNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STREAM_DATA: u64 = 10;
const STREAM_CROP: u64 = 11;
const STREAM_INIT: u64 = 12;

pub const DISCRIMINATOR_KINDS: [DiscriminatorKind; 3] = [DiscriminatorKind::Global, DiscriminatorKind::Part, DiscriminatorKind::Source];

/// F: X -> Y, G: Y -> X, and the three multi-thread discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct Nets<T> {
    pub f: GeneratorNet<T>,
    pub g: GeneratorNet<T>,
    pub d_global: DiscriminatorNet<T>,
    pub d_part: DiscriminatorNet<T>,
    pub d_source: DiscriminatorNet<T>,
}

impl<T: Scalar> Nets<T> {
    /// Fresh networks; each gets its own seed derived from `cfg.seed`.
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
        seeds.set_stream(STREAM_INIT);
        let mut next = || seeds.next_u64();
        let (sf, sg, sdg, sdp, sdx) = (next(), next(), next(), next(), next());
        let nets = Nets {
            f: build_generator(cfg.g_base_width, cfg.g_res_blocks, sf)?,
            g: build_generator(cfg.g_base_width, cfg.g_res_blocks, sg)?,
            d_global: build_discriminator(DiscriminatorKind::Global, cfg.n_threads, cfg.d_base_width, cfg.d_global_depth, sdg)?,
            d_part: build_discriminator(DiscriminatorKind::Part, cfg.n_threads, cfg.d_base_width, cfg.d_part_depth, sdp)?,
            d_source: build_discriminator(DiscriminatorKind::Source, cfg.n_threads, cfg.d_base_width, cfg.d_global_depth, sdx)?,
        };
        nets.d_global.output_side(cfg.image_size)?;
        nets.d_part.output_side(cfg.part_size)?;
        nets.d_source.output_side(cfg.image_size)?;
        Ok(nets)
    }

    pub fn discriminator(&self, kind: DiscriminatorKind) -> &DiscriminatorNet<T> {
        match kind {
            DiscriminatorKind::Global => &self.d_global,
            DiscriminatorKind::Part => &self.d_part,
            DiscriminatorKind::Source => &self.d_source,
        }
    }

    pub fn discriminator_mut(&mut self, kind: DiscriminatorKind) -> &mut DiscriminatorNet<T> {
        match kind {
            DiscriminatorKind::Global => &mut self.d_global,
            DiscriminatorKind::Part => &mut self.d_part,
            DiscriminatorKind::Source => &mut self.d_source,
        }
    }
}

/// Checkpoint prefix of each network.
pub fn net_prefix(net: NetId) -> &'static str {
    match net {
        NetId::F => "F",
        NetId::G => "G",
        NetId::D(DiscriminatorKind::Global) => "D_global",
        NetId::D(DiscriminatorKind::Part) => "D_part",
        NetId::D(DiscriminatorKind::Source) => "D_source",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetId {
    F,
    G,
    D(DiscriminatorKind),
}

pub const ALL_NETS: [NetId; 5] = [NetId::F, NetId::G, NetId::D(DiscriminatorKind::Global), NetId::D(DiscriminatorKind::Part), NetId::D(DiscriminatorKind::Source)];

/// Test hooks for a single step.
#[derive(Clone, Debug, Default)]
pub struct StepControls {
    /// Discriminator threads whose loss is multiplied by zero before backward.
    pub zero_threads: Vec<(DiscriminatorKind, usize)>,
    /// Compute the generator losses but leave F and G unchanged.
    pub skip_generator_update: bool,
}

/// Loss values and raw gradient norms of one step. Discriminator losses
/// are unscaled by alpha.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub g_total: f64,
    pub g_adv_global: f64,
    pub g_adv_part: f64,
    pub g_adv_source: f64,
    pub cycle_x: f64,
    pub cycle_y: f64,
    pub d_global: f64,
    pub d_part: f64,
    pub d_source: f64,
    pub grad_norm_generators: f64,
    pub grad_norm_d_global: f64,
    pub grad_norm_d_part: f64,
    pub grad_norm_d_source: f64,
    pub per_thread_d_global: Vec<f64>,
    pub per_thread_d_part: Vec<f64>,
    pub per_thread_d_source: Vec<f64>,
}

impl StepReport {
    pub fn per_thread_d_losses(&self, kind: DiscriminatorKind) -> &[f64] {
        match kind {
            DiscriminatorKind::Global => &self.per_thread_d_global,
            DiscriminatorKind::Part => &self.per_thread_d_part,
            DiscriminatorKind::Source => &self.per_thread_d_source,
        }
    }
}

/// Owns the networks, optimizer states and every random stream of a run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub cfg: TrainingConfig,
    pub nets: Nets<T>,
    pub adam: Vec<AdamState<T>>,
    pub data_rng: ChaCha8Rng,
    pub crop: CropSpec,
    pub sampler: EpochSampler,
    pub iteration: u64,
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var, term: &str, iteration: u64) -> Result<f64> {
    let x = tape.value(v).item().as_f64();
    if !x.is_finite() {
        return Err(Error::NonFinite { term: term.to_string(), iteration });
    }
    Ok(x)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl<T: Scalar> Trainer<T> {
    /// `n_source` sizes the epoch sampler. `alpha = 0` is accepted here.
    pub fn new(cfg: TrainingConfig, n_source: usize) -> Result<Self> {
        cfg.validate_relaxed()?;
        if n_source == 0 {
            return Err(Error::TooFew { what: "source images", need: 1, got: 0 });
        }
        let nets = Nets::new(&cfg)?;
        let adam = ALL_NETS.iter().map(|&n| AdamState::new(Self::store_of(&nets, n))).collect();
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(STREAM_DATA);
        let crop = CropSpec::new(cfg.part_size, cfg.seed, STREAM_CROP)?;
        Ok(Trainer { nets, adam, data_rng, crop, sampler: EpochSampler::new(n_source), iteration: 0, cfg })
    }

    fn store_of(nets: &Nets<T>, id: NetId) -> &crate::params::ParamStore<T> {
        match id {
            NetId::F => &nets.f.params,
            NetId::G => &nets.g.params,
            NetId::D(k) => &nets.discriminator(k).params,
        }
    }

    fn store_mut(&mut self, id: NetId) -> &mut crate::params::ParamStore<T> {
        match id {
            NetId::F => &mut self.nets.f.params,
            NetId::G => &mut self.nets.g.params,
            NetId::D(k) => &mut self.nets.discriminator_mut(k).params,
        }
    }

    pub fn store(&self, id: NetId) -> &crate::params::ParamStore<T> {
        Self::store_of(&self.nets, id)
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.cfg.lr, beta1: self.cfg.adam_beta1, beta2: self.cfg.adam_beta2, eps: self.cfg.adam_eps }
    }

    fn optimize(&mut self, id: NetId) -> Result<()> {
        let idx = ALL_NETS.iter().position(|&n| n == id).expect("known net");
        let cfg = self.adam_config();
        let mut state = std::mem::replace(&mut self.adam[idx], AdamState { m: Vec::new(), v: Vec::new(), step: 0 });
        let r = adam_step(self.store_mut(id), &mut state, &cfg);
        self.adam[idx] = state;
        r
    }

    pub fn train_step(&mut self, ds: &OneShotDataset<T>) -> Result<StepReport> {
        self.train_step_with(ds, &StepControls::default())
    }

    /// One D-then-G iteration on a fresh one-shot batch.
    pub fn train_step_with(&mut self, ds: &OneShotDataset<T>, controls: &StepControls) -> Result<StepReport> {
        if ds.side() != self.cfg.image_size {
            return Err(Error::shape("train_step", "image size", self.cfg.image_size, ds.side()));
        }
        let (xb, yb) = one_shot_batch(ds, &mut self.sampler, self.cfg.batch_size, &mut self.data_rng)?;
        self.step_on_batch(xb, yb, controls)
    }

    /// One iteration on explicit batches (`x` from X, `y` from Y).
    pub fn step_on_batch(&mut self, xb: Tensor<T>, yb: Tensor<T>, controls: &StepControls) -> Result<StepReport> {
        let it = self.iteration + 1;
        let form = self.cfg.loss_form;
        let balance = self.cfg.balance();
        let b = xb.shape()[0];

        // (1) generator forward passes
        let mut gt = Tape::new();
        let bf = self.nets.f.params.bind(&mut gt, true);
        let bg = self.nets.g.params.bind(&mut gt, true);
        let x = gt.constant(xb.clone());
        let y = gt.constant(yb.clone());
        let fx = self.nets.f.forward(&mut gt, &bf, x)?;
        let gfx = self.nets.g.forward(&mut gt, &bg, fx)?;
        let gy = self.nets.g.forward(&mut gt, &bg, y)?;
        let fgy = self.nets.f.forward(&mut gt, &bf, gy)?;

        // (2) discriminators on detached fakes, one loss per thread
        let side = self.cfg.image_size;
        let real_off = self.crop.sample_offsets(b, side)?;
        let fake_off = self.crop.sample_offsets(b, side)?;
        let mut dt = Tape::new();
        let dy = dt.constant(yb);
        let dfx = dt.constant(gt.value(fx).clone());
        let dx = dt.constant(xb);
        let dgy = dt.constant(gt.value(gy).clone());
        let ps = self.cfg.part_size;
        let ry = dt.crop_each(dy, &real_off, ps)?;
        let rf = dt.crop_each(dfx, &fake_off, ps)?;
        let inputs = [(DiscriminatorKind::Global, dy, dfx), (DiscriminatorKind::Part, ry, rf), (DiscriminatorKind::Source, dx, dgy)];
        let mut d_bound = Vec::new();
        let mut d_terms = Vec::new();
        let mut d_values: Vec<Vec<f64>> = Vec::new();
        for (kind, real, fake) in inputs {
            let net = self.nets.discriminator(kind);
            let bound = net.params.bind(&mut dt, true);
            let r = net.forward_threads(&mut dt, &bound, real)?;
            let f = net.forward_threads(&mut dt, &bound, fake)?;
            let losses = thread_d_losses(&mut dt, &r, &f, form)?;
            let mut vals = Vec::with_capacity(losses.len());
            for (t, &l) in losses.iter().enumerate() {
                vals.push(scalar_of(&dt, l, &format!("{}[{t}]", kind.label()), it)?);
                let weight = if controls.zero_threads.contains(&(kind, t)) {
                    0.0
                } else if kind == DiscriminatorKind::Source {
                    1.0
                } else {
                    balance.alpha
                };
                d_terms.push(if weight == 1.0 { l } else { dt.scale(l, weight)? });
            }
            d_values.push(vals);
            d_bound.push(bound);
        }
        let d_total = dt.add_all(&d_terms)?;
        let d_grads = dt.backward(d_total)?;
        let mut d_norms = [0.0; 3];
        for (i, kind) in DISCRIMINATOR_KINDS.into_iter().enumerate() {
            let store = &mut self.nets.discriminator_mut(kind).params;
            store.accumulate_grads(&d_bound[i], &d_grads);
            d_norms[i] = store.grad_norm().as_f64();
            self.optimize(NetId::D(kind))?;
        }
        drop(dt);

        // (3) generators against the updated, frozen discriminators
        let fake_crops = gt.crop_each(fx, &fake_off, ps)?;
        let mut g_terms = Vec::new();
        for (kind, fake) in [(DiscriminatorKind::Global, fx), (DiscriminatorKind::Part, fake_crops), (DiscriminatorKind::Source, gy)] {
            let net = self.nets.discriminator(kind);
            let frozen = net.params.bind(&mut gt, false);
            let maps = net.forward_threads(&mut gt, &frozen, fake)?;
            g_terms.push(averaged_g_loss(&mut gt, &maps, form)?.0);
        }
        let cx = cycle_loss(&mut gt, x, gfx)?;
        let cy = cycle_loss(&mut gt, y, fgy)?;
        let total = generator_objective(&mut gt, &g_terms[..2], g_terms[2], &[cx, cy], &balance)?;
        let g_adv_global = scalar_of(&gt, g_terms[0], "g_adv_global", it)?;
        let g_adv_part = scalar_of(&gt, g_terms[1], "g_adv_part", it)?;
        let g_adv_source = scalar_of(&gt, g_terms[2], "g_adv_source", it)?;
        let cycle_x = scalar_of(&gt, cx, "cycle_x", it)?;
        let cycle_y = scalar_of(&gt, cy, "cycle_y", it)?;
        let g_total = scalar_of(&gt, total, "g_total", it)?;
        let g_grads = gt.backward(total)?;
        self.nets.f.params.accumulate_grads(&bf, &g_grads);
        self.nets.g.params.accumulate_grads(&bg, &g_grads);
        let gn = self.nets.f.params.grad_norm().as_f64().hypot(self.nets.g.params.grad_norm().as_f64());
        if controls.skip_generator_update {
            self.nets.f.params.zero_grads();
            self.nets.g.params.zero_grads();
        } else {
            self.optimize(NetId::F)?;
            self.optimize(NetId::G)?;
        }

        self.iteration = it;
        let [pg, pp, ps_] = [d_values[0].clone(), d_values[1].clone(), d_values[2].clone()];
        Ok(StepReport {
            iteration: it,
            g_total,
            g_adv_global,
            g_adv_part,
            g_adv_source,
            cycle_x,
            cycle_y,
            d_global: mean(&pg),
            d_part: mean(&pp),
            d_source: mean(&ps_),
            grad_norm_generators: gn,
            grad_norm_d_global: d_norms[0],
            grad_norm_d_part: d_norms[1],
            grad_norm_d_source: d_norms[2],
            per_thread_d_global: pg,
            per_thread_d_part: pp,
            per_thread_d_source: ps_,
        })
    }

    /// Translates `images` (each `[3, S, S]`) with F, in chunks.
    pub fn translate_images(&self, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        translate_with(&self.nets.f, images)
    }
}

/// Runs `net` over `images` in batches of 16.
pub fn translate_with<T: Scalar>(net: &GeneratorNet<T>, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        out.extend(net.translate(&Tensor::stack(chunk)?)?.unstack());
    }
    Ok(out)
}

/// Where a training loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct LoopOutput {
    pub dir: Option<PathBuf>,
}

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("iter_{iteration:06}.ckpt")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub trainer: Trainer<T>,
    pub telemetry: Vec<StepReport>,
    pub seconds: Vec<f64>,
}

/// Runs `trainer` up to `cfg.iterations` total iterations. With an output
/// directory, telemetry rows are appended as they are produced, periodic
/// checkpoints are written, and the final state goes to `final.ckpt`.
pub fn continue_training<T: Scalar>(mut trainer: Trainer<T>, ds: &OneShotDataset<T>, out: &LoopOutput) -> Result<TrainOutcome<T>> {
    let mut writer = match &out.dir {
        Some(dir) => Some(TelemetryWriter::create(dir, trainer.cfg.n_threads, trainer.iteration)?),
        None => None,
    };
    let mut telemetry = Vec::new();
    let mut seconds = Vec::new();
    while trainer.iteration < trainer.cfg.iterations {
        let start = Instant::now();
        let report = trainer.train_step(ds)?;
        let secs = start.elapsed().as_secs_f64();
        if let Some(w) = writer.as_mut() {
            w.append(&report, secs)?;
        }
        if let (Some(dir), every) = (&out.dir, trainer.cfg.checkpoint_every) {
            if every > 0 && trainer.iteration % every == 0 {
                save_checkpoint(&Checkpoint::from_trainer(&trainer)?, &dir.join(checkpoint_name(trainer.iteration)))?;
            }
        }
        telemetry.push(report);
        seconds.push(secs);
    }
    if let Some(dir) = &out.dir {
        save_checkpoint(&Checkpoint::from_trainer(&trainer)?, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { trainer, telemetry, seconds })
}

/// Fresh run of `cfg.iterations` steps.
pub fn train_loop<T: Scalar>(ds: &OneShotDataset<T>, cfg: &TrainingConfig, out: &LoopOutput) -> Result<TrainOutcome<T>> {
    if ds.side() != cfg.image_size {
        return Err(Error::shape("train_loop", "image size", cfg.image_size, ds.side()));
    }
    let trainer = Trainer::new(cfg.clone(), ds.source_images.len())?;
    continue_training(trainer, ds, out)
}

/// Resumes from a checkpoint file.
pub fn resume<T: Scalar>(path: &Path, ds: &OneShotDataset<T>, out: &LoopOutput) -> Result<TrainOutcome<T>> {
    let trainer = load_checkpoint(path)?.into_trainer()?;
    continue_training(trainer, ds, out)
}
