use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the language-modeling loss.
    pub alpha: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub soft_label_max: f64,
    pub soft_label_ramp_epochs: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub max_query_len: usize,
    pub max_doc_len: usize,
    pub max_target_len: usize,
    /// Negatives sharing the anchor's document id are excluded.
    pub mask_duplicate_docs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            momentum: 0.995,
            queue_size: 1024,
            soft_label_max: 0.4,
            soft_label_ramp_epochs: 2.0,
            batch_size: 16,
            epochs: 10,
            peak_lr: 1e-5,
            warmup_steps: 1000,
            warmup_lr: 1e-6,
            min_lr: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            max_query_len: 32,
            max_doc_len: 128,
            max_target_len: 32,
            mask_duplicate_docs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GearError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.queue_size < self.batch_size {
            return fail(format!("queue size {} must be >= batch size {} > 0", self.queue_size, self.batch_size));
        }
        if !(0.0..1.0).contains(&self.soft_label_max) || self.soft_label_ramp_epochs <= 0.0 {
            return fail("soft label weight must be in [0, 1) with a positive ramp".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        let lrs = [self.peak_lr, self.warmup_lr, self.min_lr];
        if lrs.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return fail("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return fail("optimizer betas must be in [0, 1) and eps positive".into());
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return fail("weight decay must be non-negative and clip norm positive".into());
        }
        if self.max_query_len < 3 || self.max_doc_len < 3 || self.max_target_len < 2 {
            return fail("sequence limits too small".into());
        }
        Ok(())
    }
}
