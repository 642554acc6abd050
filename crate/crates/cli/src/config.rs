use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voxlift::decoder::DecoderConfig;
use voxlift::objective::{TrainOptions, DEFAULT_TEMPERATURE};
use voxlift::{PoolStrategy, DEFAULT_TOKEN_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    pub aux_loss: bool,
    /// Overrides `decoder.selection_threshold` when set.
    pub selection_threshold: Option<f64>,
    pub multi_positive: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            aux_loss: false,
            selection_threshold: None,
            multi_positive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pooling: PoolStrategy,
    pub decoder: DecoderConfig,
    pub objective: ObjectiveConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pooling: PoolStrategy::VoxelCapped {
                voxel_size: 0.2,
                cap: DEFAULT_TOKEN_CAP,
                seed: 0,
            },
            decoder: DecoderConfig::default(),
            objective: ObjectiveConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Decoder settings with the objective's threshold override applied.
    pub fn decoder(&self) -> Result<DecoderConfig> {
        let mut d = self.decoder.clone();
        if let Some(t) = self.objective.selection_threshold {
            d.selection_threshold = t;
        }
        if let Err(e) = d.validate() {
            bail!("{e}");
        }
        Ok(d)
    }

    pub fn train_options(&self, steps: usize, lr: f64, momentum: f64) -> TrainOptions {
        TrainOptions {
            steps,
            lr,
            momentum,
            temperature: self.objective.temperature,
            aux_loss: self.objective.aux_loss,
            multi_positive: self.objective.multi_positive,
        }
    }
}
