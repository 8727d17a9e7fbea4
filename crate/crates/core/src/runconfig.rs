//! Run configuration file: TOML with `[model]`, `[train]` and `[data]`
//! sections. Every key is optional (defaults fill the rest); unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (overridden by `--data`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub samples: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: None, samples: 4, size: 64, classes: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn one_line(s: impl ToString) -> String {
    s.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

impl RunConfigFile {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| Error::Config(one_line(e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.classes != self.model.decoder.num_classes {
            return Err(Error::Config(format!(
                "data.classes={} does not match model.decoder.num_classes={}",
                self.data.classes, self.model.decoder.num_classes
            )));
        }
        let m = self.model.size_multiple();
        if self.data.size == 0 || !self.data.size.is_multiple_of(m) {
            return Err(Error::Config(format!("data.size={} must be a positive multiple of {m}", self.data.size)));
        }
        Ok(())
    }
}
