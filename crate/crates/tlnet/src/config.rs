//! The experiment configuration file. Every numeric hyperparameter lives
//! here; command-line flags only pick files and modes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tlnet_core::dataset::SceneSpec;
use tlnet_core::eval::Interpolation;
use tlnet_core::pipeline::DetectorConfig;

use crate::dataset_io::{read_text, DataError};
use crate::kitti::{LEFT_CAMERA, RIGHT_CAMERA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub train_frames: usize,
    pub val_frames: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            train_frames: 200,
            val_frames: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub class_name: String,
    pub interpolation: Interpolation,
    /// Measure localization distance in the ground plane instead of 3D.
    pub loc_bev: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            class_name: "Car".into(),
            interpolation: Interpolation::ElevenPoint,
            loc_bev: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    /// Every variant is trained once per seed; AP is averaged over seeds.
    pub seeds: Vec<u64>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings { seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Calibration keys of the left and right camera matrices.
    pub left_camera: String,
    pub right_camera: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            left_camera: LEFT_CAMERA.into(),
            right_camera: RIGHT_CAMERA.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSettings,
    pub synth: SynthSettings,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
    pub scene: SceneSpec,
    pub detector: DetectorConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Read(#[from] DataError),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::from_toml(&read_text(path)?).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.detector
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scene
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.ablate.seeds.is_empty() {
            return Err(ConfigError::Invalid("ablate.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tlnet_core::pipeline::DetectorMode;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("[detector]\nmode = \"mono\"\ntop_k = 10\n").unwrap();
        assert_eq!(cfg.detector.mode, DetectorMode::Mono);
        assert_eq!(cfg.detector.top_k, 10);
        assert_eq!(cfg.detector.learning_rate, 1e-4);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[detector]\nlearning_rat = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[nonsense]\n").is_err());
    }
}
