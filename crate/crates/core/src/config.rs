//! Run configuration: a single TOML file drives training, evaluation,
//! and ablation. Every field has a default, so a minimal config is
//! `[data.scene]` plus whatever the run wants to override.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synth::SceneSpec;

/// Environment variable that overrides the config seed when set.
pub const SEED_ENV: &str = "LISA_SEED";

/// Where the text-anchor set comes from. With neither field set, the
/// shipped prompt pool is embedded by the deterministic pseudo encoder.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AnchorSource {
    pub path: Option<String>,
    pub prompts: Option<Vec<String>>,
}

/// Dataset inputs: either a directory written by `data gen` or an inline
/// scene spec rendered on the fly; eval side optional for plain training.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub path: Option<String>,
    pub scene: Option<SceneSpec>,
    pub eval_path: Option<String>,
    pub eval_scene: Option<SceneSpec>,
    /// When set, keep only subjects with id ≤ this for training and
    /// route the rest to the eval split.
    pub train_subject_max: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub run_id: String,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub anchors: AnchorSource,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run_id: "run".to_string(),
            epochs: 5,
            max_steps: None,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            seed: 42,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            anchors: AnchorSource::default(),
            data: DataConfig {
                scene: Some(SceneSpec::default()),
                ..DataConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        // lr = 0 is legal: the no-update determinism probe relies on it.
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config(format!(
                "weight_decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config(format!(
                "run_id {:?} must be a plain name",
                self.run_id
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        if self.data.path.is_none() && self.data.scene.is_none() {
            return Err(Error::config(
                "data requires either `path` or an inline `scene`",
            ));
        }
        if let Some(s) = &self.data.scene {
            s.validate()?;
        }
        if let Some(s) = &self.data.eval_scene {
            s.validate()?;
        }
        Ok(())
    }

    /// Replace the seed from the environment override, when present.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v.parse().map_err(|e| {
                Error::config(format!("{SEED_ENV}={v:?} is not a valid u64 seed: {e}"))
            })?;
            self.seed = seed;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
        offset: e.span().map(|s| s.start as u64).unwrap_or(0),
        message: format!("config: {}", e.message()),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_train_config(&text)
}

pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Parse {
        offset: e.span().map(|s| s.start as u64).unwrap_or(0),
        message: format!("scene spec: {}", e.message()),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_scene_spec(path: impl AsRef<Path>) -> Result<SceneSpec> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_scene_spec(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = parse_train_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn minimal_toml_fills_defaults() {
        let cfg = parse_train_config("epochs = 3\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert!(cfg.model.use_spectral_injection);
        assert!(cfg.data.scene.is_some());
    }

    #[test]
    fn nested_overrides_apply() {
        let text = r#"
            run_id = "ablation-a"
            batch_size = 8

            [model]
            use_sdm = false

            [model.backbone]
            stage_channels = [8, 16]
            detail_stage_index = 0
            guide_stage_index = 1
            aligned_channels = 16

            [loss]
            lambda_sep = 0.0

            [data.scene]
            n_samples = 32
            seed = 5
        "#;
        let cfg = parse_train_config(text).unwrap();
        assert_eq!(cfg.run_id, "ablation-a");
        assert!(!cfg.model.use_sdm);
        assert_eq!(cfg.model.backbone.stage_channels, vec![8, 16]);
        assert_eq!(cfg.loss.lambda_sep, 0.0);
        assert_eq!(cfg.data.scene.as_ref().unwrap().n_samples, 32);
        // Unset scene fields keep their defaults.
        assert_eq!(cfg.data.scene.as_ref().unwrap().image_size, (64, 64));
    }

    #[test]
    fn bad_toml_reports_offset() {
        let err = parse_train_config("epochs = \"three\"\n").unwrap_err();
        match err {
            Error::Parse { message, .. } => assert!(message.contains("config"), "{message}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse_train_config("epochs = 0\n").is_err());
        assert!(parse_train_config("batch_size = 0\n").is_err());
        assert!(parse_train_config("learning_rate = -1.0\n").is_err());
        assert!(parse_train_config("run_id = \"a/b\"\n").is_err());
        let mut cfg = TrainConfig::default();
        cfg.data.scene = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_seed_overrides_config() {
        let mut cfg = TrainConfig::default();
        std::env::set_var(SEED_ENV, "777");
        cfg.apply_env_seed().unwrap();
        assert_eq!(cfg.seed, 777);
        std::env::set_var(SEED_ENV, "not-a-number");
        assert!(cfg.apply_env_seed().is_err());
        std::env::remove_var(SEED_ENV);
        cfg.seed = 1;
        cfg.apply_env_seed().unwrap();
        assert_eq!(cfg.seed, 1);
    }

    #[test]
    fn scene_spec_parses_standalone() {
        let spec = parse_scene_spec(
            "yaw_range = [-0.5, 0.5]\npitch_range = [-0.3, 0.3]\nimage_size = [64, 64]\nn_subjects = 4\nn_samples = 16\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(spec.n_samples, 16);
        assert!(parse_scene_spec("yaw_range = [-3.0, 3.0]\npitch_range = [-0.3, 0.3]\nimage_size = [64, 64]\nn_subjects = 4\nn_samples = 16\nseed = 9\n").is_err());
    }
}
