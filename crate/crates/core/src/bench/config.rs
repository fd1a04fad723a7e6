//! TOML experiment configuration and run manifests.
//!
//! ```toml
//! precision = "f32"      # or "f64"
//! seed = 0               # model init and batch order
//!
//! [model]
//! classes = 4
//! aux_head = "atm"       # "atm" or "fcn"
//! decode_head = "atm"
//!
//! [model.backbone]
//! image_h = 32
//! image_w = 32
//! patch = 4
//! dim = 64
//! layers = 6
//! heads = 4
//! stage_boundaries = [3, 4]
//!
//! [data]
//! train_images = 512
//! eval_images = 128
//!
//! [data.scene]           # synthetic scene generator
//! classes = 4
//! ...
//!
//! [train]                # optimizer and scheme
//! [prune]                # p0, k, method
//! ```
//!
//! Every table except `[model]` is optional and falls back to the desk
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::data::SynthSceneConfig;
use crate::bench::train::TrainConfig;
use crate::engine::{PruneConfig, PruneMethod};
use crate::error::{Error, Result};
use crate::tensor::DType;
use crate::vit::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_images: usize,
    pub eval_images: usize,
    pub scene: SynthSceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_images: 512,
            eval_images: 128,
            scene: SynthSceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub precision: DType,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

/// Command-line style overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub p0: Option<f64>,
    pub k: Option<usize>,
    pub method: Option<PruneMethod>,
    pub boundaries: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            precision: DType::F32,
            seed: 0,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            context: "experiment config".into(),
            detail: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p0) = o.p0 {
            self.prune.p0 = p0;
        }
        if let Some(k) = o.k {
            self.prune.k = k;
        }
        if let Some(m) = o.method {
            self.prune.method = m;
        }
        if let Some(b) = &o.boundaries {
            self.model.backbone.stage_boundaries = b.clone();
            let aux = b.len();
            self.train.aux_weights.resize(aux, 1.0);
        }
        if let Some(s) = o.seed {
            self.seed = s;
            self.train.seed = s;
        }
    }

    /// Checks the whole config, including agreement between the model and
    /// the scene generator.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.prune.validate()?;
        let scene = &self.data.scene;
        scene.validate()?;
        let b = &self.model.backbone;
        if scene.classes != self.model.classes {
            return Err(Error::Config(format!(
                "scene has {} classes, model {}",
                scene.classes, self.model.classes
            )));
        }
        if (scene.image_h, scene.image_w) != (b.image_h, b.image_w) || b.channels != 3 {
            return Err(Error::Config(
                "scene image size must match the backbone input (3 channels)".into(),
            ));
        }
        if self.train.aux_weights.len() != b.stage_boundaries.len() {
            return Err(Error::Config(format!(
                "{} aux weights for {} auxiliary heads",
                self.train.aux_weights.len(),
                b.stage_boundaries.len()
            )));
        }
        Ok(())
    }
}

/// Record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Manifest {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
