//! Run configuration read from TOML; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GoatConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds weight initialization and batch sampling.
    pub seed: u64,
    /// Dataset split directory.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: GoatConfig,
    pub train: TrainConfig,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let a = &self.model.attention;
        if a.num_self_cross_layers == 0 || a.window_grid.0 == 0 || a.window_grid.1 == 0 {
            return Err(Error::Config(format!("attention dimensions must be positive: {a:?}")));
        }
        self.train.loss.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.train.optimizer.lr)));
        }
        Ok(())
    }
}
