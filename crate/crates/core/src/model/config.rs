use serde::{Deserialize, Serialize};

use crate::error::{GearError, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Encoder depth, shared by the query, document and fusion stacks.
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub decoder_layers: usize,
    /// 1-based fusion layer whose cross-attention drives local retrieval.
    pub local_layer: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 4,
            heads: 4,
            ffn: 256,
            vocab_size: 8192,
            max_positions: 128,
            decoder_layers: 4,
            local_layer: 3,
            tau_init: 0.07,
            tau_min: 0.001,
            tau_max: 0.5,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Desk defaults with `local_layer = layers - 1`.
    pub fn with_depth(layers: usize) -> Self {
        Self { layers, decoder_layers: layers, local_layer: layers.saturating_sub(1).max(1), ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GearError::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.layers == 0 || self.decoder_layers == 0 || self.ffn == 0 {
            return fail("layers, decoder_layers and ffn must be positive".into());
        }
        if !(1..=self.layers).contains(&self.local_layer) {
            return fail(format!("local_layer {} outside 1..={}", self.local_layer, self.layers));
        }
        if self.vocab_size < crate::text::NUM_SPECIALS + 1 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_positions < 3 {
            return fail("max_positions must be at least 3".into());
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return fail(format!(
                "temperature bounds must satisfy 0 < {} <= {} <= {}",
                self.tau_min, self.tau_init, self.tau_max
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 || self.init_std <= 0.0 {
            return fail("layer_norm_eps and init_std must be positive".into());
        }
        Ok(())
    }
}
