//! Run configuration: model topology, loss weighting, thresholds, optimizer
//! settings and presets. All structs deserialize from the JSON config file
//! with per-field defaults, so partial configs are valid.

use crate::blocks::DsVariant;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of encoder/decoder levels.
    pub levels: usize,
    /// Channel width after the initial convolution.
    pub base_channels: usize,
    /// Cap for the doubling channel schedule.
    pub max_channels: usize,
    /// SSM state dimension N.
    pub state_dim: usize,
    /// Input spectral bands.
    pub in_bands: usize,
    /// Dilation rates of the large-scale branch.
    pub dilations: (usize, usize, usize),
    /// Dual-scale fusion variant.
    pub variant: DsVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 5,
            base_channels: 16,
            max_channels: 256,
            state_dim: 8,
            in_bands: 4,
            dilations: (1, 2, 4),
            variant: DsVariant::Fused,
        }
    }
}

impl ModelConfig {
    /// Channel width at depth `l` (0 = after the initial conv).
    pub fn channels(&self, l: usize) -> usize {
        (self.base_channels << l).min(self.max_channels)
    }

    /// Input spatial sizes must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.base_channels < 1 || self.state_dim < 1 || self.in_bands < 1 {
            return Err(Error::Config(
                "base_channels, state_dim and in_bands must be positive".into(),
            ));
        }
        let (d1, d2, d3) = self.dilations;
        if d1 == 0 || d1 > d2 || d2 > d3 {
            return Err(Error::Config(format!(
                "dilations must satisfy 1 <= d1 <= d2 <= d3, got ({d1},{d2},{d3})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ThresholdConfig {
    /// Uncertainty acceptance threshold.
    pub gamma: f64,
    /// Coarse-mask classification threshold.
    pub tau_c: f64,
    /// Refined-mask classification threshold.
    pub tau_r: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { gamma: 0.4, tau_c: 0.5, tau_r: 0.5 }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("tau_c", self.tau_c), ("tau_r", self.tau_r)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie strictly in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    /// Dice smoothing term.
    pub dice_eps: f64,
    /// Deep-supervision weights per level; `None` uses `2^-(l-1)`.
    pub aux_weights: Option<Vec<f64>>,
    /// Supervise the refined probability map alongside the coarse one.
    pub supervise_refiner: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            dice_eps: 1.0,
            aux_weights: None,
            supervise_refiner: true,
        }
    }
}

impl LossConfig {
    /// Deep-supervision weight for level `l` (1-based).
    pub fn alpha(&self, l: usize) -> f64 {
        match &self.aux_weights {
            Some(w) => w.get(l - 1).copied().unwrap_or(0.0),
            None => 0.5f64.powi(l as i32 - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.dice_eps <= 0.0 {
            return Err(Error::Config("dice_eps must be > 0".into()));
        }
        if let Some(w) = &self.aux_weights {
            if w.iter().any(|&v| v < 0.0) {
                return Err(Error::Config("aux weights must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub thresholds: ThresholdConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// Random flip/rotation augmentation during training.
    pub augment: bool,
    /// Cosine annealing floor as a fraction of the initial lr.
    pub lr_min_factor: f64,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            thresholds: ThresholdConfig::default(),
            optim: OptimConfig::default(),
            epochs: 30,
            batch_size: 8,
            seed: 42,
            deterministic: false,
            augment: true,
            lr_min_factor: 1e-2,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.thresholds.validate()?;
        if self.optim.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Bundled configuration overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Small fast setup: 3 levels, 64x64 patches, 5 epochs.
    Desk,
    /// The full training recipe: 5 levels, 30 epochs.
    Paper,
}

impl Preset {
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Preset::Desk => {
                cfg.model.levels = 3;
                cfg.model.base_channels = 16;
                cfg.epochs = 5;
                cfg.batch_size = 8;
            }
            Preset::Paper => {
                cfg.model.levels = 5;
                cfg.epochs = 30;
            }
        }
    }

    /// Default synthetic patch size for the preset.
    pub fn patch_size(self) -> usize {
        match self {
            Preset::Desk => 64,
            Preset::Paper => 512,
        }
    }
}
