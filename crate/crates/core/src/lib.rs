//! ELBO-based calibration of pixel-text alignment for conditional diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: noise schedules, log-SNR and its derivative.
//! - [`objectives`]: the five training-objective parameterizations and their
//!   unweighting to the common ELBO integrand.
//! - [`elbo`]: Monte-Carlo ELBO estimation with common random numbers and the
//!   alignment score built from it.
//! - [`gaussian_oracle`]: closed-form per-class Gaussian data model used as ground truth.
//! - [`toyscene`]: synthetic grid scenes and a constructed attention denoiser.
//! - [`calibrate`]: heatmap extraction, calibration, posterior and masks.
//! - [`metrics`]: mIoU / precision / F1.
//! - [`harness`], [`io`], [`config`], [`verify`]: dataset runs, file formats and
//!   the oracle verification suites driven by the CLI.

pub mod calibrate;
pub mod config;
pub mod elbo;
pub mod error;
pub mod gaussian_oracle;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod resize;
pub mod rng;
pub mod schedule;
pub mod toyscene;
pub mod verify;

pub use error::{Error, Result};

/// Latent tensor laid out as `(H_z, W_z, D_z)`.
pub type Latent = ndarray::Array3<f64>;

/// Squared L2 norm summed over every element.
pub fn squared_norm<'a, I>(values: I) -> f64
where
    I: IntoIterator<Item = &'a f64>,
{
    values.into_iter().map(|v| v * v).sum()
}
