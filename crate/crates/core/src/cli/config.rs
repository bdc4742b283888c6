//! Run configuration: one TOML document covering analysis, both networks,
//! discriminators, degradation and optimization. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoisenet::DenoiseConfig;
use crate::error::{Error, Result};
use crate::objectives::DiscriminatorConfig;
use crate::pipeline::{DegradationSpec, TrainConfig};
use crate::repairnet::RepairConfig;
use crate::spectral::StftConfig;

pub const PAPER_TOML: &str = include_str!("../../presets/paper.toml");
pub const TOY_TOML: &str = include_str!("../../presets/toy.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub stft: StftConfig,
    /// Shared by teacher and student; each phase sets the causality it needs.
    pub repair: RepairConfig,
    pub denoise: DenoiseConfig,
    pub discriminator: DiscriminatorConfig,
    pub degradation: DegradationSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        Self::parse(PAPER_TOML).expect("paper preset parses")
    }

    pub fn toy() -> Self {
        Self::parse(TOY_TOML).expect("toy preset parses")
    }

    /// A preset name (`paper`, `toy`) or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.repair.validate()?;
        self.denoise.validate()?;
        self.discriminator.validate()?;
        self.degradation.validate(self.stft.sample_rate)?;
        self.train.validate()?;
        let bins = self.stft.bins();
        if self.repair.bins != bins || self.denoise.bins != bins {
            return Err(Error::Config(format!(
                "stft gives {bins} bins but repair expects {} and denoise {}",
                self.repair.bins, self.denoise.bins
            )));
        }
        if self.preset.is_empty() || self.preset.chars().any(char::is_whitespace) {
            return Err(Error::Config("preset must be a single token".into()));
        }
        Ok(())
    }
}
