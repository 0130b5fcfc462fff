//! Run configuration shared by the library pipeline and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elbo::{SamplingStrategy, StrategyKind};
use crate::objectives::ObjectiveKind;
use crate::rng;
use crate::schedule::Schedule;
use crate::toyscene::ToyParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboConfig {
    pub strategy: StrategyKind,
    pub steps: usize,
    /// Seed of the random timestep strategy.
    pub seed: u64,
    pub gamma: f64,
    /// Evaluate each timestep at `ε` and `−ε`.
    pub antithetic: bool,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Even,
            steps: 20,
            seed: 0,
            gamma: 1.0 / 3.0,
            antithetic: true,
        }
    }
}

impl ElboConfig {
    pub fn sampling(&self) -> SamplingStrategy {
        SamplingStrategy::new(self.strategy, self.steps, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub steps: usize,
    pub range: (f64, f64),
    /// Draw the timesteps uniformly from `range` instead of an even grid.
    pub random: bool,
    /// Stream index of the attention-collection noise; also seeds random draws.
    pub seed: u64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            range: (0.0, 0.2),
            random: false,
            seed: 0,
        }
    }
}

impl AttentionConfig {
    pub fn sampling(&self) -> SamplingStrategy {
        let kind = if self.random { StrategyKind::Random } else { StrategyKind::Even };
        SamplingStrategy::new(kind, self.steps, self.seed).with_range(self.range.0, self.range.1)
    }
}

/// How the calibration exponent is read from the alignment score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExponentReading {
    /// `v ← v^(1/S)`: the S-th root with S as the root index.
    #[default]
    Root,
    /// `v ← v^S`.
    Power,
}

impl std::str::FromStr for ExponentReading {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "root" => Ok(Self::Root),
            "power" => Ok(Self::Power),
            _ => Err(Error::Config(format!("unknown exponent reading `{s}` (expected root or power)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub enabled: bool,
    pub reading: ExponentReading,
    /// Replace every alignment score by this constant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_s: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            reading: ExponentReading::Root,
            fixed_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Score classes absent from both prediction and ground truth as IoU 1.
    pub include_absent: bool,
    /// Count background as a class in the mIoU mean.
    pub background_in_miou: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            include_absent: false,
            background_in_miou: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: Schedule,
    pub objective: ObjectiveKind,
    pub elbo: ElboConfig,
    pub attention: AttentionConfig,
    pub calibration: CalibrationConfig,
    /// Background threshold on the winning posterior; `None` picks one from the class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub softmax_temp: f64,
    pub self_attention_iterations: usize,
    pub toy: ToyParams,
    pub metrics: MetricsConfig,
    pub data_seed: u64,
    pub noise_seed: u64,
    /// Worker threads; `None` uses every core. Results do not depend on it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub float32: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            objective: ObjectiveKind::Epsilon,
            elbo: ElboConfig::default(),
            attention: AttentionConfig::default(),
            calibration: CalibrationConfig::default(),
            threshold: None,
            softmax_temp: 1.0,
            self_attention_iterations: 1,
            toy: ToyParams::default(),
            metrics: MetricsConfig::default(),
            data_seed: 0,
            noise_seed: 0,
            threads: None,
            float32: false,
        }
    }
}

/// Background threshold for `n` candidate classes: above the uniform
/// posterior `1/n` (0.6 for two classes), so a pixel no class dominates
/// stays background.
pub fn default_threshold(n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        1.0 / (n as f64 - 1.0 / 3.0)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let g = self.elbo.gamma;
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {g}")));
        }
        if self.elbo.steps == 0 || self.attention.steps == 0 {
            return Err(Error::Config("ELBO and attention steps must be positive".into()));
        }
        self.elbo.sampling().effective_range()?;
        self.attention.sampling().effective_range()?;
        if let Some(s) = self.calibration.fixed_s {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!("fixed S must lie in (0, 1], got {s}")));
            }
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold must lie in [0, 1], got {t}")));
            }
        }
        if !(self.softmax_temp > 0.0 && self.softmax_temp.is_finite()) {
            return Err(Error::Config("softmax temperature must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be positive".into()));
        }
        Ok(())
    }

    pub fn threshold_for(&self, n: usize) -> f64 {
        self.threshold.unwrap_or_else(|| default_threshold(n))
    }

    pub fn toy_params(&self) -> ToyParams {
        ToyParams {
            float32: self.float32 || self.toy.float32,
            ..self.toy
        }
    }

    /// Noise seed of the ELBO stream for one scene.
    pub fn elbo_noise_seed(&self, scene_seed: u64) -> u64 {
        rng::mix(rng::mix(self.noise_seed, scene_seed), 0x656c_626f)
    }

    /// Noise seed of the attention-collection stream for one scene.
    pub fn attention_noise_seed(&self, scene_seed: u64) -> u64 {
        rng::mix(rng::mix(self.noise_seed, scene_seed), 0x6174_746e ^ self.attention.seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
