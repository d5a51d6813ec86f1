//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the vocabulary when a model is built for training.
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Sequence length S, including the leading CLS position.
    pub max_len: usize,
    pub dropout: f64,
    /// Output channels of the two attention conv blocks.
    pub conv_channels: [usize; 2],
    pub attention_embed_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            num_layers: 4,
            num_heads: 4,
            model_dim: 128,
            ffn_dim: 256,
            max_len: 64,
            dropout: 0.1,
            conv_channels: [16, 32],
            attention_embed_dim: 64,
            feature_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers < 3 {
            return fail(format!(
                "num_layers must be at least 3 for the last-three-layer features, got {}",
                self.num_layers
            ));
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!("model_dim {} must be divisible by num_heads {}", self.model_dim, self.num_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.vocab_size < 3 {
            return fail(format!("vocab_size must cover the reserved ids, got {}", self.vocab_size));
        }
        if [self.ffn_dim, self.attention_embed_dim, self.feature_dim, self.conv_channels[0], self.conv_channels[1]]
            .contains(&0)
        {
            return fail("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Spatial side of the attention map after both stride-2 conv blocks.
    pub fn conv_output_side(&self) -> usize {
        let once = |s: usize| s.div_ceil(2);
        once(once(self.max_len))
    }

    /// Same architecture, ignoring vocabulary size and dropout.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        let strip = |c: &ModelConfig| ModelConfig { vocab_size: 0, dropout: 0.0, ..c.clone() };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Maximum epochs; the best dev epoch is kept.
    pub epochs: usize,
    /// Stop after this many epochs without dev improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
    /// Probability at or above which a statement is labelled counterfactual.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 50,
            patience: None,
            seed: 42,
            vocab_min_freq: 2,
            vocab_max_size: 8192,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self::default()
    }

    pub fn stage2() -> Self {
        Self { epochs: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas must be in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_once_vocab_is_known() {
        let mut m = ModelConfig::default();
        assert!(m.validate().is_err());
        m.vocab_size = 100;
        m.validate().unwrap();
        assert_eq!(m.conv_output_side(), 16);
        TrainConfig::stage1().validate().unwrap();
        assert_eq!(TrainConfig::stage2().epochs, 100);
    }

    #[test]
    fn rejects_bad_shapes() {
        let base = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
        assert!(ModelConfig { num_layers: 2, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { num_heads: 3, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn odd_lengths_round_up_through_convs() {
        let m = ModelConfig { max_len: 6, ..ModelConfig::default() };
        assert_eq!(m.conv_output_side(), 2);
        let m = ModelConfig { max_len: 5, ..ModelConfig::default() };
        assert_eq!(m.conv_output_side(), 2);
    }
}
