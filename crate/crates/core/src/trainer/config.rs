use serde::{Deserialize, Serialize};

use crate::data::{AugmentFlags, SUPPORTED_SIZES};
use crate::error::{Error, Result};
use crate::losses::{BalanceConfig, LossForm};
use crate::model::{max_discriminator_depth, DEFAULT_GLOBAL_DEPTH, DEFAULT_PART_DEPTH};

/// Every knob of a training run. Missing JSON fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub n_threads: usize,
    pub part_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub cycle_weight: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub loss_form: LossForm,
    pub g_base_width: usize,
    pub g_res_blocks: usize,
    /// Total channels of the first discriminator block, split across threads.
    pub d_base_width: usize,
    pub d_global_depth: usize,
    pub d_part_depth: usize,
    pub augmentation: AugmentFlags,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.1,
            n_threads: 4,
            part_size: 16,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            cycle_weight: 10.0,
            iterations: 2000,
            batch_size: 1,
            seed: 0,
            image_size: 32,
            loss_form: LossForm::NonsaturatingLog,
            g_base_width: 8,
            g_res_blocks: 2,
            d_base_width: 16,
            d_global_depth: DEFAULT_GLOBAL_DEPTH,
            d_part_depth: DEFAULT_PART_DEPTH,
            augmentation: AugmentFlags::all(),
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn balance(&self) -> BalanceConfig {
        BalanceConfig { alpha: self.alpha, cycle_weight: self.cycle_weight }
    }

    /// All violated constraints, empty when the config is usable.
    /// `alpha = 0` is reported only when `strict_alpha` is set.
    pub fn problems(&self, strict_alpha: bool) -> Vec<String> {
        let mut p = Vec::new();
        let alpha_ok = if strict_alpha { self.alpha > 0.0 && self.alpha <= 1.0 } else { (0.0..=1.0).contains(&self.alpha) };
        if !alpha_ok {
            p.push(format!("alpha must be in {} 1], got {}", if strict_alpha { "(0," } else { "[0," }, self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            p.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.cycle_weight >= 0.0 && self.cycle_weight.is_finite()) {
            p.push(format!("cycle_weight must be non-negative, got {}", self.cycle_weight));
        }
        if self.n_threads == 0 {
            p.push("n_threads must be at least 1".into());
        } else if self.d_base_width == 0 || self.d_base_width % self.n_threads != 0 {
            p.push(format!("d_base_width ({}) must be a positive multiple of n_threads ({})", self.d_base_width, self.n_threads));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            p.push(format!("image_size must be one of {SUPPORTED_SIZES:?}, got {}", self.image_size));
        }
        if self.part_size == 0 || self.part_size > self.image_size {
            p.push(format!("part_size must be in 1..={}, got {}", self.image_size, self.part_size));
        }
        if self.g_base_width < 4 {
            p.push(format!("g_base_width must be at least 4, got {}", self.g_base_width));
        }
        if self.g_res_blocks == 0 {
            p.push("g_res_blocks must be at least 1".into());
        }
        if self.d_global_depth < 2 || self.d_part_depth < 2 {
            p.push(format!("discriminator depths must be at least 2, got global {} and part {}", self.d_global_depth, self.d_part_depth));
        }
        for (name, depth, size_name, side) in [("d_global_depth", self.d_global_depth, "image_size", self.image_size), ("d_part_depth", self.d_part_depth, "part_size", self.part_size)] {
            let max = max_discriminator_depth(side);
            if side > 0 && depth > max {
                p.push(format!("{name} {depth} is too deep for {size_name} {side} (at most {max})"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        check(self.problems(true))
    }

    pub(crate) fn validate_relaxed(&self) -> Result<()> {
        check(self.problems(false))
    }
}

fn check(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}
