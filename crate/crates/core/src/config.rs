//! Run configuration read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::head::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    /// Minimum detection confidence.
    pub threshold: f64,
    /// Report each class once, by its most confident query.
    pub unique: bool,
    /// Overlay images written per evaluation.
    pub overlays: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.1],
            threshold: 0.0,
            unique: true,
            overlays: 8,
            warmup: 3,
            iters: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives dataset generation, weight initialization and batch order.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset location; `<out_dir>/data` when absent.
    pub data_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            data_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A nonexistent file is a missing input; anything else that goes wrong
    /// is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                path: path.to_path_buf(),
                reason: "config file not found".into(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(config_err)?;
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.loss.validate().map_err(config_err)?;
        let classes = self.data.rules().len();
        if self.model.num_classes != classes {
            return Err(Error::Config(format!(
                "model.num_classes is {} but the rule set has {classes} points",
                self.model.num_classes
            )));
        }
        let size = self.data.skeleton.image_size;
        let g = self.model.backbone.granularity();
        if size % g != 0 {
            return Err(Error::Config(format!("image_size {size} is not a multiple of {g}")));
        }
        if self.model.backbone.in_channels != 1 {
            return Err(Error::Config("rendered images have one channel".into()));
        }
        let tokens: usize = (0..3).map(|l| (size / (self.model.backbone.patch << l)).pow(2)).sum();
        if self.model.num_queries > tokens {
            return Err(Error::Config(format!("num_queries exceeds the {tokens} available tokens")));
        }
        let e = &self.eval;
        if e.alphas.is_empty() || e.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("eval.alphas must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1]".into()));
        }
        if e.warmup < 1 || e.iters < crate::eval::bench::MIN_ITERS {
            return Err(Error::Config(format!(
                "benchmark needs warmup >= 1 and iters >= {}",
                crate::eval::bench::MIN_ITERS
            )));
        }
        Ok(())
    }
}
