use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::data::SyntheticDatasetSpec;

/// Optimiser and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub ce_weight: f64,
    pub dice_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_every: 200,
            seed: 0,
            ce_weight: 1.0,
            dice_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("iterations, batch_size and eval_every must be positive");
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if ![self.lr, self.weight_decay, self.ce_weight, self.dice_weight]
            .into_iter()
            .all(finite_nonneg)
        {
            return bad("lr, weight_decay and loss weights must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.ce_weight + self.dice_weight == 0.0 {
            return bad("at least one loss weight must be positive");
        }
        Ok(())
    }
}

/// Model, optimiser and data settings in one file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticDatasetSpec,
}

impl RunConfig {
    /// Toy setting: 32×32 single-ellipse images, two classes.
    pub fn tiny() -> Self {
        let model = ModelConfig::tiny(2);
        Self {
            data: SyntheticDatasetSpec::for_model(&model),
            model,
            train: TrainConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Points every random stream at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let m = &self.model;
        if (self.data.height, self.data.width, self.data.num_classes)
            != (m.input_h, m.input_w, m.num_classes)
        {
            return Err(Error::Config(format!(
                "data is {}x{} with {} classes but the model expects {}x{} with {}",
                self.data.height, self.data.width, self.data.num_classes, m.input_h, m.input_w, m.num_classes
            )));
        }
        if m.in_channels != 1 {
            return Err(Error::Config("synthetic data has a single channel".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let t = TrainConfig::default();
        assert_eq!((t.iterations, t.batch_size, t.lr, t.momentum, t.weight_decay, t.eval_every), (2000, 4, 0.01, 0.9, 1e-4, 200));
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn strict_keys() {
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1, "learning_rate": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::tiny().with_seed(9);
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mismatched_data_rejected() {
        let mut c = RunConfig::tiny();
        c.data.height = 64;
        assert!(c.validate().is_err());
        let mut c = RunConfig::tiny();
        c.train.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
