use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossWeights, ModelFlags};

/// Learning rate for fine-tuning a large pretrained encoder.
pub const FULL_SCALE_LEARNING_RATE: f64 = 2e-5;
/// Rationale-loss weights worth searching over.
pub const RATIONALE_WEIGHT_GRID: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub learning_rate: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            mask_prob: 0.15,
            learning_rate: 1e-3,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_prob == 0.0 {
            return Err(Error::NothingToPredict);
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!("mask_prob {} not in (0, 1)", self.mask_prob)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("mlm epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("mlm learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossWeights,
    pub seed: u64,
    pub mlm: MlmConfig,
    pub flags: ModelFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 4,
            loss: LossWeights::default(),
            seed: 12,
            mlm: MlmConfig::default(),
            flags: ModelFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.loss.identification >= 0.0 && self.loss.rationale >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.mlm.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.batch_size, c.epochs, c.seed), (32, 4, 12));
        assert_eq!((c.mlm.epochs, c.mlm.batch_size), (3, 8));
        assert_eq!((c.loss.identification, c.loss.rationale), (1.0, 0.5));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = TrainConfig::default();
        c.loss.rationale = -0.1;
        assert!(c.validate().is_err());
        let mut m = MlmConfig::default();
        m.mask_prob = 0.0;
        assert!(matches!(m.validate(), Err(Error::NothingToPredict)));
        m.mask_prob = 1.0;
        assert!(m.validate().is_err());
    }
}
