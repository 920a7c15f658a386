use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadLayout;

/// Architecture of the toy encoder-decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            heads: 4,
            enc_layers: 4,
            dec_layers: 2,
            ffn: 128,
            max_len: 24,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ffn", self.ffn),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must leave room for BOS/EOS".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
        }
    }
}

/// Optimisation hyperparameters (Adam, no label smoothing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Decay the rate linearly to zero between the end of warmup and the last step.
    pub linear_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Seed of the batch shuffling stream.
    pub seed: u64,
    /// Sentences (per language) in the fixed dev batch used for loss tracking.
    pub dev_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 200,
            linear_decay: true,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 1.0,
            seed: 1,
            dev_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }

    /// Learning rate of optimiser step `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.linear_decay && total > self.warmup_steps {
            let span = (total - self.warmup_steps) as f64;
            let done = step.saturating_sub(self.warmup_steps) as f64;
            (1.0 - done / span).max(0.0)
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}
