//! Run configuration: strict JSON with defaults and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::conditioning::ModalityMaskPolicy;
use crate::flow::SamplerConfig;
use crate::speaker::{GaussianLevels, SpeakerTrainConfig};
use crate::train::TrainConfig;
use crate::rng::derive_seed;
use crate::world::{build_world, DataConfig, WorldConfig, WorldError, WorldSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { threshold: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Clips generated per evaluation or per ablation strategy.
    pub n_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("run/model.snck"),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Where the natural negative strategy draws its noise clip from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Synthesize noise from the world's background process.
    pub use_world: bool,
    /// A tensor file whose first matrix is used instead.
    pub file: Option<PathBuf>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            use_world: true,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub speaker: SpeakerTrainConfig,
    pub mask: ModalityMaskPolicy,
    pub sampler: SamplerConfig,
    pub gaussian_levels: GaussianLevels,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            seed: 0,
            backbone: BackboneConfig {
                d_audio: world.d_audio,
                d_video: world.d_video,
                ..BackboneConfig::default()
            },
            world,
            data: DataConfig::default(),
            speaker: SpeakerTrainConfig::default(),
            mask: ModalityMaskPolicy::default(),
            sampler: SamplerConfig::default(),
            gaussian_levels: GaussianLevels::default(),
            noise: NoiseConfig::default(),
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// One `key.path = value` override applied on top of the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: Value,
}

impl Override {
    pub fn new(path: impl Into<String>, value: impl Into<Value>) -> Self {
        Self {
            path: path.into(),
            value: value.into(),
        }
    }

    /// Parses `a.b=value`; the value is read as JSON, falling back to a string.
    pub fn parse(spec: &str) -> Result<Self, ConfigError> {
        let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Schema {
            path: spec.to_string(),
            message: "override must look like key.path=value".into(),
        })?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self::new(path.trim(), value))
    }
}

impl RunConfig {
    /// Strict parse of a JSON document; missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Schema {
            path: ".".into(),
            message: e.to_string(),
        })?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Schema {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or defaults when `None`) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self, ConfigError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Schema {
                    path: ".".into(),
                    message: e.to_string(),
                })?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            set_path(&mut value, &o.path, o.value.clone())?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.backbone.validate().map_err(|e| invalid(&e))?;
        self.sampler.validate().map_err(|e| invalid(&e))?;
        self.mask.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if self.backbone.d_audio != self.world.d_audio || self.backbone.d_video != self.world.d_video {
            return Err(ConfigError::Invalid(format!(
                "backbone latent widths ({}, {}) differ from the world's ({}, {})",
                self.backbone.d_audio, self.backbone.d_video, self.world.d_audio, self.world.d_video
            )));
        }
        if self.eval.n_samples == 0 {
            return Err(ConfigError::Invalid("eval.n_samples must be positive".into()));
        }
        Ok(())
    }

    /// Seed of the synthetic world; shared by every command of a run.
    pub fn world_seed(&self) -> u64 {
        derive_seed(self.seed, "world-seed", 0)
    }

    pub fn build_world(&self) -> Result<WorldSpec, WorldError> {
        build_world(&self.world, self.world_seed())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| ConfigError::Schema {
            path: keys[..i].join("."),
            message: "not an object".into(),
        })?;
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
