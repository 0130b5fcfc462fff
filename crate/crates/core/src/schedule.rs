//! Continuous-time noise schedules on `t ∈ [0, 1]`.
//!
//! Every schedule maps `t` to `(α_t, σ_t)` with the forward process
//! `z_t = α_t·x_0 + σ_t·ε`. The log signal-to-noise ratio is
//! `λ(t) = 2·ln(α_t/σ_t)`, strictly decreasing in `t`.
//!
//! Evaluation is clamped to `[T_MIN, T_MAX]` so that neither `σ` nor `α`
//! reaches zero and `λ`, `λ'` stay finite.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::{Error, Latent, Result};

pub const T_MIN: f64 = 1e-4;
pub const T_MAX: f64 = 1.0 - 1e-4;

fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    2e-2
}
fn default_train_steps() -> f64 {
    1000.0
}
fn default_cosine_offset() -> f64 {
    0.008
}

/// A noise schedule, addressable from JSON as
/// `{"kind": "vp-linear", "params": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum Schedule {
    /// Variance preserving, `β(t)` linear between the per-step DDPM endpoints
    /// scaled by the number of training steps.
    VpLinear {
        #[serde(default = "default_beta_start")]
        beta_start: f64,
        #[serde(default = "default_beta_end")]
        beta_end: f64,
        #[serde(default = "default_train_steps")]
        train_steps: f64,
    },
    /// Variance preserving, `α_t = cos(θ_t)/cos(θ_0)` with
    /// `θ_t = (t+s)/(1+s)·π/2`.
    VpCosine {
        #[serde(default = "default_cosine_offset")]
        offset: f64,
    },
    /// `α_t = 1 − t`, `σ_t = t`.
    RectifiedFlow,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::vp_linear()
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vp-linear" => Ok(Schedule::vp_linear()),
            "vp-cosine" => Ok(Schedule::vp_cosine()),
            "rectified-flow" => Ok(Schedule::RectifiedFlow),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Clamp `t` into the evaluation window after checking it lies in `[0, 1]`.
pub fn clamp_time(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    Ok(t.clamp(T_MIN, T_MAX))
}

/// The three schedule kinds with default parameters.
pub fn all_kinds() -> [Schedule; 3] {
    [
        Schedule::vp_linear(),
        Schedule::vp_cosine(),
        Schedule::RectifiedFlow,
    ]
}

impl Schedule {
    pub fn vp_linear() -> Self {
        Schedule::VpLinear {
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            train_steps: default_train_steps(),
        }
    }

    pub fn vp_cosine() -> Self {
        Schedule::VpCosine {
            offset: default_cosine_offset(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::VpLinear { .. } => "vp-linear",
            Schedule::VpCosine { .. } => "vp-cosine",
            Schedule::RectifiedFlow => "rectified-flow",
        }
    }

    pub fn is_variance_preserving(&self) -> bool {
        !matches!(self, Schedule::RectifiedFlow)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::VpLinear {
                beta_start,
                beta_end,
                train_steps,
            } => {
                if !(beta_start > 0.0 && beta_end >= beta_start && train_steps > 0.0) {
                    return Err(Error::Config(format!(
                        "vp-linear needs 0 < beta_start <= beta_end and train_steps > 0, got \
                         ({beta_start}, {beta_end}, {train_steps})"
                    )));
                }
            }
            Schedule::VpCosine { offset } => {
                if !(offset > 0.0 && offset < 1.0) {
                    return Err(Error::Config(format!(
                        "vp-cosine offset must lie in (0, 1), got {offset}"
                    )));
                }
            }
            Schedule::RectifiedFlow => {}
        }
        Ok(())
    }

    /// Instantaneous VP rate `β(t) = −d ln α_t²/dt` (VP kinds only).
    fn vp_beta(&self, t: f64) -> f64 {
        match *self {
            Schedule::VpLinear {
                beta_start,
                beta_end,
                train_steps,
            } => train_steps * (beta_start + (beta_end - beta_start) * t),
            Schedule::VpCosine { offset } => {
                let rate = FRAC_PI_2 / (1.0 + offset);
                2.0 * rate * (cosine_angle(offset, t)).tan()
            }
            Schedule::RectifiedFlow => unreachable!("rectified flow has no VP rate"),
        }
    }

    /// `(α_t², σ_t²)` for VP kinds, each computed without cancellation.
    fn vp_moments(&self, t: f64) -> (f64, f64) {
        match *self {
            Schedule::VpLinear {
                beta_start,
                beta_end,
                train_steps,
            } => {
                let integral = train_steps * (beta_start * t + 0.5 * (beta_end - beta_start) * t * t);
                ((-integral).exp(), -(-integral).exp_m1())
            }
            Schedule::VpCosine { offset } => {
                let theta0 = cosine_angle(offset, 0.0);
                let theta = cosine_angle(offset, t);
                let c0 = theta0.cos();
                let alpha = theta.cos() / c0;
                // cos²θ0 − cos²θ = sin(θ−θ0)·sin(θ+θ0)
                let sigma_sq = (theta - theta0).sin() * (theta + theta0).sin() / (c0 * c0);
                (alpha * alpha, sigma_sq)
            }
            Schedule::RectifiedFlow => unreachable!("rectified flow is not variance preserving"),
        }
    }

    /// `(α_t, σ_t)` at `t` clamped to the evaluation window.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let t = clamp_time(t)?;
        Ok(match self {
            Schedule::RectifiedFlow => (1.0 - t, t),
            _ => {
                let (a2, s2) = self.vp_moments(t);
                (a2.sqrt(), s2.sqrt())
            }
        })
    }

    /// `(dα/dt, dσ/dt)` at clamped `t`.
    pub fn alpha_sigma_derivatives(&self, t: f64) -> Result<(f64, f64)> {
        let t = clamp_time(t)?;
        Ok(match self {
            Schedule::RectifiedFlow => (-1.0, 1.0),
            _ => {
                let beta = self.vp_beta(t);
                let (a2, s2) = self.vp_moments(t);
                let alpha = a2.sqrt();
                (-0.5 * beta * alpha, 0.5 * beta * a2 / s2.sqrt())
            }
        })
    }

    /// `λ(t) = 2·ln(α_t/σ_t)`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        let t = clamp_time(t)?;
        Ok(match self {
            Schedule::RectifiedFlow => 2.0 * ((1.0 - t) / t).ln(),
            _ => {
                let (a2, s2) = self.vp_moments(t);
                a2.ln() - s2.ln()
            }
        })
    }

    /// Analytic `λ'(t)`; strictly negative on the evaluation window.
    pub fn log_snr_derivative(&self, t: f64) -> Result<f64> {
        let t = clamp_time(t)?;
        let value = match self {
            Schedule::RectifiedFlow => -2.0 / (t * (1.0 - t)),
            _ => {
                let (_, s2) = self.vp_moments(t);
                -self.vp_beta(t) / s2
            }
        };
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "λ'({t}) is not finite for {}",
                self.name()
            )));
        }
        Ok(value)
    }

    /// Central finite difference of `λ` with step `h`, used to cross-check
    /// [`Schedule::log_snr_derivative`].
    pub fn log_snr_derivative_fd(&self, t: f64, h: f64) -> Result<f64> {
        let t = clamp_time(t)?;
        if t - h < T_MIN || t + h > T_MAX {
            return Err(Error::Domain(format!(
                "finite-difference stencil around {t} with h={h} leaves the evaluation window"
            )));
        }
        Ok((self.log_snr(t + h)? - self.log_snr(t - h)?) / (2.0 * h))
    }

    /// Forward noising `z_t = α_t·x_0 + σ_t·ε`.
    pub fn add_noise(&self, x0: &Latent, t: f64, eps: &Latent) -> Result<NoisedSample> {
        if x0.shape() != eps.shape() {
            return Err(Error::shape(x0.shape(), eps.shape()));
        }
        let (alpha, sigma) = self.alpha_sigma(t)?;
        let mut zt = x0 * alpha;
        zt.scaled_add(sigma, eps);
        Ok(NoisedSample {
            x0: x0.clone(),
            eps: eps.clone(),
            t,
            zt,
        })
    }
}

fn cosine_angle(offset: f64, t: f64) -> f64 {
    (t + offset) / (1.0 + offset) * FRAC_PI_2
}

/// A latent together with the noise and timestep that produced `zt`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x0: Latent,
    pub eps: Latent,
    pub t: f64,
    pub zt: Latent,
}
