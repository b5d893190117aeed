use serde::{Deserialize, Serialize};

use crate::error::{MmsError, Result};
use crate::losses::{LossWeights, NegativeKeys, Temperature};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub tau: Temperature,
    pub loss_weights: LossWeights,
    pub k_neg: NegativeKeys,
    pub use_classifiers: bool,
    pub use_projectors: bool,
    pub seed: u64,
    /// Write a checkpoint after every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            tau: Temperature::default(),
            loss_weights: LossWeights::default(),
            k_neg: NegativeKeys::default(),
            use_classifiers: true,
            use_projectors: true,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MmsError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MmsError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.loss_weights.validate()
    }

    /// Loss weights after the head switches: a disabled head contributes nothing.
    pub fn effective_weights(&self) -> LossWeights {
        let mut lw = self.loss_weights;
        if !self.use_classifiers {
            lw.lambda2 = 0.0;
        }
        if !self.use_projectors {
            lw.lambda4 = 0.0;
        }
        lw
    }
}
