use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dual_metric::CgsBackground;
use crate::embedding::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

/// How β evolves over meta-training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPolicy {
    /// `β = 1 − epoch / max_epoch`.
    #[default]
    Linear,
    /// Fixed β for the whole run.
    Constant(f64),
}

/// Head used for fine-grained predictions at meta-test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgsInference {
    #[default]
    Npm,
    Agm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Random rescaling factor range.
    pub scale_range: (f64, f64),
    /// Randomly crop (after zero padding if needed) back to the input size;
    /// otherwise the rescaled image is resized to it.
    pub crop: bool,
    /// Random horizontal flip with probability 0.5.
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_range: (0.5, 2.0),
            crop: true,
            flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Separable conv layers in each `φ`.
    pub head_depth: usize,
    pub cgs_background: CgsBackground,
    /// Initial weight of `ω` and `ω_bg`; biases start at zero.
    pub npm_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_depth: 2,
            cgs_background: CgsBackground::ExplicitPrototype,
            npm_init_scale: 10.0,
        }
    }
}

/// Everything that determines a training run.
///
/// ```toml
/// seed = 7
/// max_epoch = 30
/// episodes_per_epoch = 40
/// initial_lr = 0.02
///
/// [loss]
/// nca = 1.0
/// agm_cgs = 1.0
/// dml_fgs = 1.0
/// tau = 0.1
///
/// [model.encoder]
/// input_size = [64, 64]
/// feature_dim = 32
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_epoch: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Bound on the global L2 norm of each step's gradient; unset disables clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    /// Smoothing factor of the momentum prototypes.
    pub alpha: f64,
    pub warmup_epochs: usize,
    pub loss: LossWeights,
    pub beta: BetaPolicy,
    pub inference: FgsInference,
    pub augmentation: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_epoch: 50,
            episodes_per_epoch: 100,
            batch_size: 2,
            initial_lr: 0.001,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0,
            max_grad_norm: None,
            alpha: 0.001,
            warmup_epochs: 3,
            loss: LossWeights::default(),
            beta: BetaPolicy::Linear,
            inference: FgsInference::Npm,
            augmentation: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_epoch == 0 {
            return bad("max_epoch must be positive".into());
        }
        if self.episodes_per_epoch == 0 || self.batch_size == 0 {
            return bad("episodes_per_epoch and batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0) || !(self.poly_power > 0.0) {
            return bad("initial_lr and poly_power must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay must be nonnegative".into());
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return bad(format!("max_grad_norm {m} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if let BetaPolicy::Constant(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("constant beta {b} outside [0, 1]"));
            }
        }
        let (lo, hi) = self.augmentation.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("scale range ({lo}, {hi}) is not a positive interval"));
        }
        if self.model.head_depth == 0 {
            return bad("head_depth must be positive".into());
        }
        if !(self.model.npm_init_scale > 0.0) {
            return bad("npm_init_scale must be positive".into());
        }
        self.loss.validate()?;
        self.model.encoder.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }

    /// Optimizer steps of the whole run, the horizon of the poly schedule.
    pub fn max_iter(&self) -> usize {
        self.max_epoch * self.steps_per_epoch()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(detail) => Error::Parse {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
