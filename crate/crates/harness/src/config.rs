//! Experiment configuration in TOML. Every field is required and unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use renorm_core::connections::ConnectionSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::DecodeConfig;
use crate::detector::{ConnectionSetup, DetectorConfig, ToyDetector};
use crate::error::{HarnessError, Result};
use crate::loss::LossConfig;
use crate::scene::SceneSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_images: usize,
    pub test_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub connection: ConnectionSpec,
    pub training: TrainConfig,
    /// Training seeds; one run per entry.
    pub seeds: Vec<u64>,
    pub loss: LossConfig,
    pub evaluation: DecodeConfig,
    pub outputs: OutputConfig,
}

impl ExperimentConfig {
    /// Tiny-mode scenes, baseline pyramid, the default schedule.
    pub fn example() -> Self {
        Self {
            scene: SceneSpec::tiny(0),
            dataset: DatasetConfig {
                train_images: 200,
                test_images: 50,
            },
            detector: DetectorConfig::default(),
            connection: ConnectionSpec::baseline(),
            training: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            loss: LossConfig::default(),
            evaluation: DecodeConfig::default(),
            outputs: OutputConfig {
                directory: PathBuf::from("runs/example"),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        self.connection.validate()?;
        self.training.validate()?;
        self.loss.validate()?;
        self.evaluation.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must list at least one seed".into()));
        }
        if self
            .seeds
            .iter()
            .chain([&self.scene.seed])
            .any(|&s| s > i64::MAX as u64)
        {
            return Err(HarnessError::Config("seeds must fit in a signed 64-bit integer".into()));
        }
        self.build_detector()?;
        Ok(())
    }

    pub fn build_detector(&self) -> Result<ToyDetector> {
        ToyDetector::new(
            self.detector.clone(),
            ConnectionSetup::from_spec(&self.connection)?,
            self.scene.image_size,
        )
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
