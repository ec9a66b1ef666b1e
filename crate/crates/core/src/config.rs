//! Run configuration: one JSON file fully determines a training run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::ModelConfig;
use crate::pipeline::DataConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Every problem across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.model.validate() {
            p.push(format!("model: {e}"));
        }
        p.extend(self.train.problems());
        p.extend(self.data.problems());
        let m = self.model.size_multiple();
        let size = self.data.input_size();
        if m > 0 && size % m != 0 {
            p.push(format!("data input size {size} is not divisible by {m}, required by {}", self.model.variant.name()));
        }
        let predict = self.data.resize_to;
        if m > 0 && predict % m != 0 && predict != size {
            p.push(format!("data.resize_to {predict} is not divisible by {m}"));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} problem(s):\n  - {}", p.len(), p.join("\n  - "))))
        }
    }
}
