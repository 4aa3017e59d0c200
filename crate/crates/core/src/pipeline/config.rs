//! Run configuration: one JSON file drives data, all three stages, the
//! optimizer, and the prototype source.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::classifier::{ClassifierConfig, ClassifierMode};
use crate::data::{ClassId, SceneSpec, SplitConfig};
use crate::error::{GzslError, Result};
use crate::generator::GeneratorConfig;
use crate::numerics::adam::AdamConfig;

fn default_room() -> [f64; 3] {
    [6.0, 4.0, 3.0]
}
fn default_sigma() -> f64 {
    0.01
}
fn default_scale() -> f64 {
    1.0
}
fn default_train_frames() -> usize {
    4
}
fn default_eval_frames() -> usize {
    2
}
fn default_floor() -> usize {
    10_000
}
fn default_wall() -> usize {
    13_400
}
fn default_cobot() -> usize {
    1_800
}
fn default_human() -> usize {
    2_800
}
fn default_agv() -> usize {
    1_200
}

/// Scene shape for generated data; per-frame seeds come from the run seed,
/// so the same config and seed always produce the same frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_floor")]
    pub floor_points: usize,
    #[serde(default = "default_wall")]
    pub wall_points: usize,
    #[serde(default = "default_cobot")]
    pub cobot_points: usize,
    #[serde(default = "default_human")]
    pub human_points: usize,
    #[serde(default = "default_agv")]
    pub agv_points: usize,
    #[serde(default = "default_room")]
    pub room: [f64; 3],
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    /// Multiplies all per-class counts; 0.1 gives the reduced desk-scale
    /// frames.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_train_frames")]
    pub train_frames: usize,
    #[serde(default = "default_eval_frames")]
    pub eval_frames: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            floor_points: default_floor(),
            wall_points: default_wall(),
            cobot_points: default_cobot(),
            human_points: default_human(),
            agv_points: default_agv(),
            room: default_room(),
            noise_sigma: default_sigma(),
            scale: default_scale(),
            train_frames: default_train_frames(),
            eval_frames: default_eval_frames(),
        }
    }
}

impl SceneConfig {
    pub fn spec_with_seed(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            floor_points: self.floor_points,
            wall_points: self.wall_points,
            cobot_points: self.cobot_points,
            human_points: self.human_points,
            agv_points: self.agv_points,
            room: self.room,
            noise_sigma: self.noise_sigma,
            seed,
        }
        .scaled(self.scale)
    }
}

/// Where frames come from: generated scenes or files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Scene(SceneConfig),
    Files {
        train: Vec<PathBuf>,
        eval: Vec<PathBuf>,
    },
}

/// Exactly one source of class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    File { path: PathBuf },
    Synthesize { dim: usize, seed: u64 },
}

fn default_seed() -> u64 {
    42
}
fn default_split() -> SplitConfig {
    SplitConfig::covered_default()
}
fn default_data() -> DataSource {
    DataSource::Scene(SceneConfig::default())
}
fn default_prototypes() -> PrototypeSource {
    PrototypeSource::Synthesize { dim: 64, seed: 7 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: SplitConfig,
    #[serde(default = "default_data")]
    pub data: DataSource,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_prototypes")]
    pub prototypes: PrototypeSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            split: default_split(),
            data: default_data(),
            backbone: BackboneConfig::default(),
            generator: GeneratorConfig::default(),
            classifier: ClassifierConfig::default(),
            optimizer: AdamConfig::default(),
            prototypes: default_prototypes(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| GzslError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.backbone.validate()?;
        self.generator.validate()?;
        self.classifier.validate()?;
        self.optimizer.validate()?;
        match &self.prototypes {
            PrototypeSource::Synthesize { dim, .. } if *dim < 2 => {
                return Err(GzslError::Config("prototype dim must be at least 2".into()))
            }
            _ => {}
        }
        if let DataSource::Scene(scene) = &self.data {
            if scene.scale <= 0.0 || !scene.scale.is_finite() {
                return Err(GzslError::Config("scene scale must be positive".into()));
            }
            if scene.train_frames == 0 {
                return Err(GzslError::Config("scene needs at least one training frame".into()));
            }
        }
        Ok(())
    }

    /// The label space of the configured classifier mode, ascending.
    pub fn label_space(&self) -> Vec<ClassId> {
        match self.classifier.mode {
            ClassifierMode::Gzsl => self.split.classes(),
            ClassifierMode::Zsl => self.split.unseen().iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_json() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = config.to_json();
        let parsed: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn sparse_json_fills_defaults() {
        let parsed: RunConfig = serde_json::from_str("{\"seed\": 7}").unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.backbone.feature_dim, 32);
        assert_eq!(parsed.generator.noise_dim, 32);
        assert!(matches!(parsed.data, DataSource::Scene(_)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = RunConfig::default();
        config.classifier.top_k = 99;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.optimizer.beta1 = 1.5;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.prototypes = PrototypeSource::Synthesize { dim: 1, seed: 0 };
        assert!(config.validate().is_err());
    }

    #[test]
    fn label_space_follows_mode() {
        let mut config = RunConfig::default();
        assert_eq!(config.label_space(), vec![1, 2, 3, 4, 5]);
        config.classifier.mode = ClassifierMode::Zsl;
        assert_eq!(config.label_space(), vec![1, 5]);
    }
}
