//! Monte-Carlo estimation of the ELBO objective and the alignment score.
//!
//! `ELB(x, c) = ½·E_{t,ε}[−λ'(t)·‖ε̂(z_t, t, c) − ε‖²]`, where every
//! parameterization is first unweighted to the equivalent epsilon error.
//! The `(t, ε)` stream is a pure function of `(strategy, noise_seed)` so that
//! every class condition of one image sees exactly the same samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::objectives::{self, ObjectiveKind, PredictionPair};
use crate::schedule::{Schedule, T_MAX, T_MIN};
use crate::{rng, Error, Latent, Result};

/// A conditional denoiser: returns a prediction for `z_t` at `t` under `condition`.
pub trait Denoiser<C: ?Sized> {
    fn predict(&self, zt: &Latent, t: f64, condition: &C) -> Result<Latent>;
}

impl<C: ?Sized, D: Denoiser<C> + ?Sized> Denoiser<C> for &D {
    fn predict(&self, zt: &Latent, t: f64, condition: &C) -> Result<Latent> {
        (**self).predict(zt, t, condition)
    }
}

/// Adapts an epsilon-predicting denoiser to any other parameterization.
#[derive(Debug, Clone)]
pub struct Parameterized<D> {
    pub inner: D,
    pub kind: ObjectiveKind,
    pub schedule: Schedule,
}

impl<C: ?Sized, D: Denoiser<C>> Denoiser<C> for Parameterized<D> {
    fn predict(&self, zt: &Latent, t: f64, condition: &C) -> Result<Latent> {
        let eps_hat = self.inner.predict(zt, t, condition)?;
        objectives::prediction_from_eps(self.kind, &self.schedule, zt, &eps_hat, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Even,
    Random,
    Small,
    Middle,
    Large,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Small,
        StrategyKind::Middle,
        StrategyKind::Large,
        StrategyKind::Random,
        StrategyKind::Even,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Even => "even",
            StrategyKind::Random => "random",
            StrategyKind::Small => "small",
            StrategyKind::Middle => "middle",
            StrategyKind::Large => "large",
        }
    }

    /// Nominal range before intersecting with the clamp window.
    pub fn nominal_range(&self) -> (f64, f64) {
        match self {
            StrategyKind::Even | StrategyKind::Random => (0.0, 1.0),
            StrategyKind::Small => (0.0, 0.2),
            StrategyKind::Middle => (0.4, 0.6),
            StrategyKind::Large => (0.7, 0.9),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampling strategy `{s}`")))
    }
}

/// How timesteps are drawn. Grid strategies place `steps` points evenly over
/// their range, endpoints included; `random` draws i.i.d. uniform points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: StrategyKind,
    pub steps: usize,
    pub seed: u64,
    /// Overrides the kind's nominal range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Even,
            steps: 20,
            seed: 0,
            range: None,
        }
    }
}

impl SamplingStrategy {
    pub fn new(kind: StrategyKind, steps: usize, seed: u64) -> Self {
        Self {
            kind,
            steps,
            seed,
            range: None,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some((lo, hi));
        self
    }

    /// Range intersected with `[T_MIN, T_MAX]`.
    pub fn effective_range(&self) -> Result<(f64, f64)> {
        let (lo, hi) = self.range.unwrap_or_else(|| self.kind.nominal_range());
        let (lo, hi) = (lo.max(T_MIN), hi.min(T_MAX));
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Config(format!(
                "sampling range for `{}` is empty after clamping",
                self.kind
            )));
        }
        Ok((lo, hi))
    }
}

/// Timesteps for `strategy`.
pub fn sample_timesteps(strategy: &SamplingStrategy) -> Result<Vec<f64>> {
    if strategy.steps == 0 {
        return Err(Error::Config("sampling strategy needs at least one step".into()));
    }
    let (lo, hi) = strategy.effective_range()?;
    let n = strategy.steps;
    Ok(match strategy.kind {
        StrategyKind::Random => {
            let mut r = rng::rng(strategy.seed, 0x7469_6d65);
            (0..n)
                .map(|_| if hi > lo { r.random_range(lo..hi) } else { lo })
                .collect()
        }
        _ if n == 1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    })
}

/// Seeded Gaussian noise indexed by sample position. Two streams with the
/// same seed yield identical draws, whatever conditions they are used with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn sample(&self, index: usize, shape: (usize, usize, usize)) -> Latent {
        let n = shape.0 * shape.1 * shape.2;
        let data = rng::standard_normals(&mut rng::rng(self.seed, index as u64), n);
        Latent::from_shape_vec(shape, data).expect("shape and length agree")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboSample {
    pub t: f64,
    /// `½·(−λ'(t))·‖ε̂ − ε‖²`
    pub integrand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub class_id: usize,
    pub value: f64,
    pub samples: Vec<ElboSample>,
}

/// Estimates the ELBO objective of `x0` under `condition`.
///
/// `denoiser` must answer in the parameterization `kind`; its output is
/// unweighted through [`objectives::convert_to_eps_error`].
#[allow(clippy::too_many_arguments)]
pub fn estimate_elbo<C: ?Sized, D: Denoiser<C>>(
    denoiser: &D,
    x0: &Latent,
    condition: &C,
    class_id: usize,
    strategy: &SamplingStrategy,
    schedule: &Schedule,
    kind: ObjectiveKind,
    noise_seed: u64,
) -> Result<ElboEstimate> {
    estimate_elbo_with(denoiser, x0, condition, class_id, strategy, schedule, kind, noise_seed, false)
}

/// As [`estimate_elbo`]; with `antithetic`, every timestep is evaluated at
/// both `ε` and `−ε`. The pair cancels the part of the squared error that is
/// linear in the noise, which otherwise dominates at the smallest timesteps.
#[allow(clippy::too_many_arguments)]
pub fn estimate_elbo_with<C: ?Sized, D: Denoiser<C>>(
    denoiser: &D,
    x0: &Latent,
    condition: &C,
    class_id: usize,
    strategy: &SamplingStrategy,
    schedule: &Schedule,
    kind: ObjectiveKind,
    noise_seed: u64,
    antithetic: bool,
) -> Result<ElboEstimate> {
    let timesteps = sample_timesteps(strategy)?;
    let noise = NoiseStream::new(noise_seed);
    let dim = x0.dim();
    let mut samples = Vec::with_capacity(timesteps.len() * (1 + usize::from(antithetic)));
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = noise.sample(i, dim);
        let weight = 0.5 * -schedule.log_snr_derivative(t)?;
        let mut one = |eps: &Latent| -> Result<()> {
            let noised = schedule.add_noise(x0, t, eps)?;
            let predicted = denoiser.predict(&noised.zt, t, condition)?;
            let target = objectives::target_function(kind, schedule, x0, eps, t)?;
            let pair = PredictionPair::new(predicted, target, kind, t)?;
            let integrand = weight * objectives::convert_to_eps_error(kind, schedule, &pair)?;
            if !integrand.is_finite() {
                return Err(Error::Numerical(format!(
                    "ELBO integrand at t={t} is not finite for class {class_id}"
                )));
            }
            samples.push(ElboSample { t, integrand });
            Ok(())
        };
        one(&eps)?;
        if antithetic {
            one(&-eps)?;
        }
    }
    let value = samples.iter().map(|s| s.integrand).sum::<f64>() / samples.len() as f64;
    Ok(ElboEstimate {
        class_id,
        value,
        samples,
    })
}

/// Per-class alignment scores `S_i = γ^{norm(ELB_i)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub gamma: f64,
    pub scores: Vec<f64>,
    pub raw: Vec<f64>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// Min-max normalization of a vector; a constant vector maps to zeros.
pub fn minmax(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span > 0.0 {
        values.iter().map(|v| (v - min) / span).collect()
    } else {
        vec![0.0; values.len()]
    }
}

pub fn alignment_scores(estimates: &[ElboEstimate], gamma: f64) -> Result<AlignmentScores> {
    let raw: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    alignment_scores_from_values(&raw, gamma)
}

pub fn alignment_scores_from_values(raw: &[f64], gamma: f64) -> Result<AlignmentScores> {
    check_gamma(gamma)?;
    if raw.is_empty() {
        return Err(Error::Config("alignment scores need at least one class".into()));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite ELBO estimate {bad}")));
    }
    let scores = minmax(raw).into_iter().map(|v| gamma.powf(v)).collect();
    Ok(AlignmentScores {
        gamma,
        scores,
        raw: raw.to_vec(),
    })
}

impl AlignmentScores {
    /// Every class gets the same score, independent of any estimate.
    pub fn fixed(n: usize, value: f64, raw: Vec<f64>) -> Result<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::Config(format!("fixed score must lie in (0, 1], got {value}")));
        }
        Ok(Self {
            gamma: value,
            scores: vec![value; n],
            raw,
        })
    }

    /// No calibration: `S_i = 1` for every class.
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: 1.0,
            scores: vec![1.0; n],
            raw: Vec::new(),
        }
    }
}
