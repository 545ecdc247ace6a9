//! Run configuration read from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use repsgg_core::model::{LossConfig, ModelConfig};
use repsgg_core::pgla::{PglaMetric, DEFAULT_EMA_BASE};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::features::FeatureConfig;

/// Which logit adjustment the loss sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PglaMode {
    Off,
    /// Static adjustment: `W = 1`, `B = log π`, no confusion term.
    La,
    #[default]
    On,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PglaConfig {
    pub mode: PglaMode,
    pub metric: PglaMetric,
    pub lambda: f64,
    pub ema_base: f64,
    /// Write a trace row block every this many iterations (and at the end).
    pub trace_every: usize,
}

impl Default for PglaConfig {
    fn default() -> Self {
        PglaConfig {
            mode: PglaMode::On,
            metric: PglaMetric::Recall,
            lambda: 1.0,
            ema_base: DEFAULT_EMA_BASE,
            trace_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub lr_multiplier_sampler: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of iterations after which the learning rate is decayed.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            lr_multiplier_sampler: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_at: 0.8,
            decay_factor: 0.1,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset directory holding `train.json`; relative paths resolve
    /// against the config file's directory.
    pub data: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub features: FeatureConfig,
    pub optim: OptimConfig,
    pub pgla: PglaConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Inclusive range of rep-points drawn per group each iteration.
    pub sample_range: [usize; 2],
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            features: FeatureConfig::default(),
            optim: OptimConfig::default(),
            pgla: PglaConfig::default(),
            iterations: 1000,
            batch_size: 1,
            sample_range: [1, 100],
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        self.model.validate()?;
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be >= 1");
        }
        let [lo, hi] = self.sample_range;
        if lo == 0 || hi < lo {
            return bad("sample_range must satisfy 1 <= min <= max");
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0) || !(o.lr_multiplier_sampler >= 0.0) || !(o.weight_decay >= 0.0) {
            return bad("learning rate must be positive; multiplier and weight decay non-negative");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("AdamW betas must lie in [0, 1) and eps be positive");
        }
        if o.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if !(self.pgla.lambda > 0.0) || !(self.pgla.ema_base > 0.0 && self.pgla.ema_base < 1.0) {
            return bad("pgla lambda must be positive and ema_base in (0, 1)");
        }
        if self.pgla.trace_every == 0 {
            return bad("pgla trace_every must be >= 1");
        }
        Ok(())
    }

    /// Reads a config and resolves its dataset path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| HarnessError::json(path, e))?;
        if cfg.data.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data = dir.join(&cfg.data);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
