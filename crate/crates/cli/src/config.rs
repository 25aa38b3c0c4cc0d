use std::path::Path;

use mobileie::loss::LvwConfig;
use mobileie::network::ModelConfig;
use mobileie::optim::TrainConfig;
use serde::Deserialize;

use crate::commands::Failure;

/// Synthetic data settings.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Side length of generated square images.
    pub size: usize,
    /// Generated held-out pairs; with none, validation PSNR uses the training set.
    pub val_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { size: 64, val_pairs: 0 }
    }
}

/// Every section and field is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LvwConfig,
    pub data: DataConfig,
    /// Set when the file had a `model` section.
    #[serde(skip)]
    pub explicit_model: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Failure::usage(format!("config: {e}")))?;
        let explicit_model = value.get("model").is_some();
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Failure::usage(format!("config: {e}")))?;
        cfg.explicit_model = explicit_model;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn check(&self) -> Result<(), Failure> {
        self.train.check()?;
        self.loss.check()?;
        if self.model.channels == 0 {
            return Err(Failure::usage("model.channels must be >= 1"));
        }
        if self.data.size < 2 {
            return Err(Failure::usage("data.size must be >= 2"));
        }
        Ok(())
    }
}
