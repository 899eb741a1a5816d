use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BootstrapConfig;
use crate::model::ModelConfig;
use crate::objectives::ObjectiveConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// Everything a run needs. Unknown keys anywhere in the JSON are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub bootstrap: BootstrapConfig,
    pub output_dir: PathBuf,
    pub run_name: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            bootstrap: BootstrapConfig::default(),
            output_dir: PathBuf::from("runs"),
            run_name: "default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sub-config validity plus cross-checks between the cohort and the model.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.objective.validate(self.synth.num_groups)?;
        self.train.validate()?;
        self.bootstrap.validate()?;
        if self.model.num_groups != self.synth.num_groups {
            return Err(Error::InvalidConfig(format!(
                "model.num_groups {} differs from synth.num_groups {}",
                self.model.num_groups, self.synth.num_groups
            )));
        }
        if self.model.height != self.synth.grid_size || self.model.width != self.synth.grid_size {
            return Err(Error::InvalidConfig(format!(
                "model grid {}x{} differs from synth.grid_size {}",
                self.model.height, self.model.width, self.synth.grid_size
            )));
        }
        if self.run_name.is_empty()
            || self
                .run_name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || "-_.".contains(c)))
        {
            return Err(Error::InvalidConfig(format!(
                "run_name {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.run_name
            )));
        }
        Ok(())
    }

    /// Seed override applied consistently to data, initialization and resampling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.bootstrap.seed = seed;
        self
    }

    /// Seed of the held-out evaluation cohort paired with a training cohort.
    pub fn held_out_synth(&self) -> SynthConfig {
        SynthConfig {
            seed: held_out_seed(self.synth.seed),
            ..self.synth.clone()
        }
    }
}

pub fn held_out_seed(seed: u64) -> u64 {
    seed.wrapping_add(1_000_003)
}
