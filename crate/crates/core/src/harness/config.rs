//! Training configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{invalid, Error, IoContext, Result};
use crate::losses::LossConfig;
use crate::pairs::Template;
use crate::stmap::AugSpec;
use crate::synthgen::DatasetConfig;

/// Which objectives drive training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reconstruction, vision-text, frequency contrast and ranking losses.
    #[default]
    Ssl,
    /// As `ssl`, plus the Pearson loss on a labelled fraction of the train set.
    Semi,
    /// Pearson loss only, on every train sample.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Save a checkpoint every N epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub mode: Mode,
    /// Labelled share of the train split in `semi` mode.
    pub labeled_fraction: f64,
    pub mask_ratio: f64,
    pub template: Template,
    /// Put the negative half on the left of each contrastive map.
    pub swap_sides: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 50,
            batch_size: 16,
            lr: 5e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            checkpoint_every: 10,
            seed: 0,
            deterministic: false,
            mode: Mode::Ssl,
            labeled_fraction: 0.1,
            mask_ratio: 0.6,
            template: Template::Default,
            swap_sides: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Directory holding `manifest.json`.
    pub dataset: PathBuf,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub aug: AugSpec,
    /// Generator settings used by `synth`.
    #[serde(default)]
    pub data: DatasetConfig,
}

impl TrainConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> TrainConfig {
        TrainConfig {
            dataset: dataset.into(),
            train: TrainParams::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            aug: AugSpec::default(),
            data: DatasetConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads a config; a relative `dataset` path resolves against the file's directory.
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = TrainConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config error: "))))?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return invalid("epochs and batch_size must be positive");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return invalid("lr must be positive");
        }
        if !(0.0..=1.0).contains(&t.labeled_fraction) {
            return invalid("labeled_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&t.mask_ratio) {
            return invalid("mask_ratio must lie in [0, 1)");
        }
        self.model.validate()?;
        self.aug.validate()?;
        self.loss.validate(self.data.fs)?;
        Ok(())
    }
}
