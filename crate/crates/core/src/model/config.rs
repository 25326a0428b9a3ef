use serde::{Deserialize, Serialize};

use super::ModelError;

/// How the exit confidence is read off a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMeasure {
    /// Largest class probability.
    #[default]
    MaxProb,
    /// Difference between the two largest class probabilities.
    TopGap,
}

/// Multipliers applied on top of the base `1/sqrt(d_model)` init scale.
///
/// They shape the untrained toy model so that intermediate-layer predictions
/// carry signal about the final layer: a small residual gain keeps deep layers
/// from overwriting the shallow representation, and the logit gain spreads
/// confidences over `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScales {
    pub embedding: f32,
    pub residual: f32,
    pub logits: f32,
}

impl Default for InitScales {
    fn default() -> Self {
        Self {
            embedding: 8.0,
            residual: 0.25,
            logits: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub shallow_depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub use_cross_attention: bool,
    /// 1-based layer indices where the conventional and oracle policies may
    /// exit. The last layer is always an exit point in addition to these.
    pub allowed_exit_layers: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub tie_classifier_to_embedding: bool,
    #[serde(default)]
    pub confidence_measure: ConfidenceMeasure,
    #[serde(default = "default_eos")]
    pub eos_token: Option<u32>,
    /// Decoder start token when cross-attention is enabled.
    #[serde(default = "default_bos")]
    pub bos_token: u32,
    #[serde(default)]
    pub init: InitScales,
}

fn default_eos() -> Option<u32> {
    Some(0)
}

fn default_bos() -> u32 {
    1
}

impl ModelConfig {
    /// The desk-scale reference configuration: 8 layers, shallow depth 4,
    /// width 32, vocabulary 64, exits allowed from layer 3 onward.
    pub fn toy(seed: u64) -> Self {
        Self {
            num_layers: 8,
            shallow_depth: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 64,
            max_positions: 128,
            use_cross_attention: false,
            allowed_exit_layers: (3..=8).collect(),
            seed,
            tie_classifier_to_embedding: false,
            confidence_measure: ConfidenceMeasure::MaxProb,
            eos_token: default_eos(),
            bos_token: default_bos(),
            init: InitScales::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        let l = self.num_layers;
        if l == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.shallow_depth < 1 || self.shallow_depth >= l {
            return fail(format!(
                "shallow_depth {} must satisfy 1 <= L_S < L = {l}",
                self.shallow_depth
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if let Some(bad) = self.allowed_exit_layers.iter().find(|&&x| x < 1 || x > l) {
            return fail(format!("allowed exit layer {bad} outside [1, {l}]"));
        }
        if self.allowed_exit_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail("allowed_exit_layers must be strictly increasing".into());
        }
        if let Some(eos) = self.eos_token {
            if eos as usize >= self.vocab_size {
                return fail(format!("eos_token {eos} outside vocabulary"));
            }
        }
        if self.bos_token as usize >= self.vocab_size {
            return fail(format!("bos_token {} outside vocabulary", self.bos_token));
        }
        let s = self.init;
        if !(s.embedding > 0.0 && s.residual > 0.0 && s.logits > 0.0)
            || !(s.embedding.is_finite() && s.residual.is_finite() && s.logits.is_finite())
        {
            return fail("init scales must be positive and finite".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Allowed exit layers with the final layer appended when missing.
    pub fn exit_points(&self) -> Vec<usize> {
        let mut pts = self.allowed_exit_layers.clone();
        if pts.last() != Some(&self.num_layers) {
            pts.push(self.num_layers);
        }
        pts
    }
}
