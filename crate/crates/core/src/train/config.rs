use serde::{Deserialize, Serialize};

use crate::dataset::Normalization;
use crate::error::{GaiaError, Result};
use crate::model::{Ablation, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub channels: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub kernel_groups: usize,
    pub layers: usize,
    pub t_max: usize,
    pub horizon: usize,
    pub seed: u64,
    pub ablation: Vec<String>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub normalization: Normalization,
    /// Epochs without a validation MAE improvement before stopping. `0` disables.
    pub early_stop_patience: usize,
    /// In-neighbors sampled per expanded node when building ego-subgraphs.
    pub max_neighbors: usize,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub share_cau: bool,
    /// Start the head bias at the mean normalized training target.
    pub init_head_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            channels: 32,
            batch_size: 32,
            learning_rate: 1e-5,
            epochs: 100,
            kernel_groups: 4,
            layers: 2,
            t_max: 24,
            horizon: 3,
            seed: 0,
            ablation: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            normalization: Normalization::Log1p,
            early_stop_patience: 10,
            max_neighbors: 10,
            split: [0.8, 0.1, 0.1],
            share_cau: false,
            init_head_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::parse(&self.ablation)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GaiaError::Config(m.to_string()));
        if self.channels == 0 || self.batch_size == 0 || self.layers == 0 || self.t_max == 0 {
            return bad("channels, batch_size, layers and t_max must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if self.max_neighbors == 0 {
            return bad("max_neighbors must be positive");
        }
        let ablation = self.ablation()?;
        if !ablation.no_tel {
            if self.kernel_groups == 0 || self.channels % self.kernel_groups != 0 {
                return Err(GaiaError::Config(format!(
                    "channels ({}) must be divisible by kernel_groups ({})",
                    self.channels, self.kernel_groups
                )));
            }
            if 1usize.checked_shl(self.kernel_groups as u32).map_or(true, |w| w > self.t_max) {
                return Err(GaiaError::Config(format!(
                    "widest kernel 2^{} exceeds t_max {}",
                    self.kernel_groups, self.t_max
                )));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, d_t: usize, d_s: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            t_max: self.t_max,
            horizon: self.horizon,
            channels: self.channels,
            kernel_groups: self.kernel_groups,
            layers: self.layers,
            d_t,
            d_s,
            ablation: self.ablation()?,
            share_cau: self.share_cau,
        })
    }
}
