//! Training-objective parameterizations and their unweighting.
//!
//! A diffusion network can be trained to estimate the score, the conditional
//! flow velocity, the clean sample, the noise or the velocity `α_t ε − σ_t x`.
//! Each single-timestep squared error equals `ω(t)·(−λ'(t))·‖ε̂−ε‖²` for a
//! kind-specific weight `ω(t)`, so dividing by `ω(t)` recovers the ELBO
//! integrand regardless of the parameterization.

use serde::{Deserialize, Serialize};

use crate::schedule::Schedule;
use crate::{squared_norm, Error, Latent, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// `∇ ln q(z_t | x)`
    Score,
    /// `u(z_t | ε) = α'_t x + σ'_t ε`
    Flow,
    /// `x`
    X,
    /// `ε`
    Epsilon,
    /// `α_t ε − σ_t x`
    Velocity,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Score,
        ObjectiveKind::Flow,
        ObjectiveKind::X,
        ObjectiveKind::Epsilon,
        ObjectiveKind::Velocity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Score => "score",
            ObjectiveKind::Flow => "flow",
            ObjectiveKind::X => "x",
            ObjectiveKind::Epsilon => "epsilon",
            ObjectiveKind::Velocity => "velocity",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

/// A model output next to the ground-truth target of the same objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub predicted: Latent,
    pub target: Latent,
    pub kind: ObjectiveKind,
    pub t: f64,
}

impl PredictionPair {
    pub fn new(predicted: Latent, target: Latent, kind: ObjectiveKind, t: f64) -> Result<Self> {
        if predicted.shape() != target.shape() {
            return Err(Error::shape(target.shape(), predicted.shape()));
        }
        Ok(Self {
            predicted,
            target,
            kind,
            t,
        })
    }
}

fn check_shapes(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Ground-truth target of `kind` for the forward sample built from `(x0, eps, t)`.
pub fn target_function(
    kind: ObjectiveKind,
    schedule: &Schedule,
    x0: &Latent,
    eps: &Latent,
    t: f64,
) -> Result<Latent> {
    check_shapes(x0, eps)?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(match kind {
        ObjectiveKind::Score => eps * (-1.0 / sigma),
        ObjectiveKind::Flow => {
            let (d_alpha, d_sigma) = schedule.alpha_sigma_derivatives(t)?;
            let mut u = x0 * d_alpha;
            u.scaled_add(d_sigma, eps);
            u
        }
        ObjectiveKind::X => x0.clone(),
        ObjectiveKind::Epsilon => eps.clone(),
        ObjectiveKind::Velocity => {
            let mut v = eps * alpha;
            v.scaled_add(-sigma, x0);
            v
        }
    })
}

/// Maps a noise estimate `ε̂` at `z_t` to the prediction a network trained on
/// `kind` would output.
pub fn prediction_from_eps(
    kind: ObjectiveKind,
    schedule: &Schedule,
    zt: &Latent,
    eps_hat: &Latent,
    t: f64,
) -> Result<Latent> {
    check_shapes(zt, eps_hat)?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    let x_hat = || {
        let mut x = zt - &(eps_hat * sigma);
        x /= alpha;
        x
    };
    Ok(match kind {
        ObjectiveKind::Epsilon => eps_hat.clone(),
        ObjectiveKind::Score => eps_hat * (-1.0 / sigma),
        ObjectiveKind::X => x_hat(),
        ObjectiveKind::Velocity => {
            let mut v = eps_hat * alpha;
            v.scaled_add(-sigma, &x_hat());
            v
        }
        ObjectiveKind::Flow => {
            let (d_alpha, d_sigma) = schedule.alpha_sigma_derivatives(t)?;
            let mut u = x_hat() * d_alpha;
            u.scaled_add(d_sigma, eps_hat);
            u
        }
    })
}

/// Inverse of [`prediction_from_eps`]: canonicalizes any prediction to `ε̂`.
pub fn eps_from_prediction(
    kind: ObjectiveKind,
    schedule: &Schedule,
    zt: &Latent,
    predicted: &Latent,
    t: f64,
) -> Result<Latent> {
    check_shapes(zt, predicted)?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(match kind {
        ObjectiveKind::Epsilon => predicted.clone(),
        ObjectiveKind::Score => predicted * (-sigma),
        ObjectiveKind::X => {
            let mut e = zt - &(predicted * alpha);
            e /= sigma;
            e
        }
        ObjectiveKind::Velocity => {
            let mut e = predicted * alpha;
            e.scaled_add(sigma, zt);
            e / (alpha * alpha + sigma * sigma)
        }
        ObjectiveKind::Flow => {
            let (d_alpha, d_sigma) = schedule.alpha_sigma_derivatives(t)?;
            let gain = d_sigma - d_alpha * sigma / alpha;
            let mut e = predicted.clone();
            e.scaled_add(-d_alpha / alpha, zt);
            e / gain
        }
    })
}

/// Factor `k` with `‖prediction − target‖² = k·‖ε̂ − ε‖²`.
pub fn conversion_factor(kind: ObjectiveKind, schedule: &Schedule, t: f64) -> Result<f64> {
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    let (a2, s2) = (alpha * alpha, sigma * sigma);
    Ok(match kind {
        ObjectiveKind::Score => 1.0 / s2,
        ObjectiveKind::Flow => {
            let d = schedule.log_snr_derivative(t)?;
            d * d * s2 / 4.0
        }
        ObjectiveKind::X => s2 / a2,
        ObjectiveKind::Epsilon => 1.0,
        ObjectiveKind::Velocity => (a2 + s2).powi(2) / a2,
    })
}

/// `‖predicted − target‖²` summed over every element.
pub fn single_timestep_loss(pair: &PredictionPair) -> Result<f64> {
    check_shapes(&pair.predicted, &pair.target)?;
    Ok(pair
        .predicted
        .iter()
        .zip(pair.target.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum())
}

/// Equivalent squared epsilon-prediction error `‖ε̂ − ε‖²`.
pub fn convert_to_eps_error(kind: ObjectiveKind, schedule: &Schedule, pair: &PredictionPair) -> Result<f64> {
    let factor = conversion_factor(kind, schedule, pair.t)?;
    if !(factor.is_finite() && factor > f64::MIN_POSITIVE) {
        return Err(Error::Numerical(format!(
            "conversion factor {factor} for {kind} at t={} is degenerate",
            pair.t
        )));
    }
    Ok(single_timestep_loss(pair)? / factor)
}

/// `ω(t)` weighting of each objective relative to the ELBO integrand.
pub fn omega(kind: ObjectiveKind, schedule: &Schedule, t: f64) -> Result<f64> {
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    let (a2, s2) = (alpha * alpha, sigma * sigma);
    let d = schedule.log_snr_derivative(t)?;
    let value = match kind {
        ObjectiveKind::Score => -1.0 / (s2 * d),
        ObjectiveKind::Flow => -(s2 * d) / 4.0,
        ObjectiveKind::X => -1.0 / (d * schedule.log_snr(t)?.exp()),
        ObjectiveKind::Epsilon => -1.0 / d,
        ObjectiveKind::Velocity => -(a2 + s2).powi(2) / (a2 * d),
    };
    if !value.is_finite() {
        return Err(Error::Numerical(format!("ω({t}) for {kind} is not finite")));
    }
    Ok(value)
}

/// Squared norm of a latent.
pub fn latent_squared_norm(x: &Latent) -> f64 {
    squared_norm(x.iter())
}
