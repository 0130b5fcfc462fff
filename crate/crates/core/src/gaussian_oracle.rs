//! Per-class diagonal Gaussians with closed-form denoisers, likelihoods and
//! Bayes posteriors. Serves as exact ground truth for the estimator tests.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::elbo::Denoiser;
use crate::schedule::Schedule;
use crate::{Error, Latent, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClassModel {
    /// Latent shape every class lives in; `mean.len()` equals its product.
    pub shape: (usize, usize, usize),
    pub classes: Vec<GaussianClass>,
}

impl GaussianClassModel {
    pub fn new(shape: (usize, usize, usize), classes: Vec<GaussianClass>) -> Result<Self> {
        let model = Self { shape, classes };
        model.validate()?;
        Ok(model)
    }

    /// Isotropic classes with unit variance in a `(1, 1, d)` latent.
    pub fn isotropic(means: Vec<Vec<f64>>, priors: Vec<f64>) -> Result<Self> {
        let d = means.first().map_or(0, Vec::len);
        let classes = means
            .into_iter()
            .zip(priors)
            .map(|(mean, prior)| GaussianClass {
                variance: vec![1.0; mean.len()],
                mean,
                prior,
            })
            .collect();
        Self::new((1, 1, d), classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("Gaussian model needs at least one class".into()));
        }
        let d = self.dim();
        let mut total = 0.0;
        for (i, c) in self.classes.iter().enumerate() {
            if c.mean.len() != d || c.variance.len() != d {
                return Err(Error::shape(&[d], &[c.mean.len(), c.variance.len()]));
            }
            if c.variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("class {i} has a non-positive variance")));
            }
            if c.prior.is_nan() || c.prior < 0.0 {
                return Err(Error::Config(format!("class {i} has a negative prior")));
            }
            total += c.prior;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("priors sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn class(&self, class_id: usize) -> Result<&GaussianClass> {
        self.classes
            .get(class_id)
            .ok_or_else(|| Error::Domain(format!("class {class_id} not in a {}-class model", self.classes.len())))
    }

    fn check_latent(&self, x: &Latent) -> Result<()> {
        if x.dim() != self.shape {
            let s = self.shape;
            let (a, b, c) = x.dim();
            return Err(Error::shape(&[s.0, s.1, s.2], &[a, b, c]));
        }
        Ok(())
    }

    /// `ε̂ = −σ_t ∇ ln q(z_t | c)` for the noised marginal of class `class_id`.
    pub fn optimal_eps(&self, class_id: usize, zt: &Latent, t: f64, schedule: &Schedule) -> Result<Latent> {
        let c = self.class(class_id)?;
        self.check_latent(zt)?;
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let data = zt
            .iter()
            .zip(c.mean.iter().zip(&c.variance))
            .map(|(&z, (&m, &v))| sigma * (z - alpha * m) / (alpha * alpha * v + sigma * sigma))
            .collect();
        Ok(Latent::from_shape_vec(self.shape, data).expect("validated shape"))
    }

    /// `ln q(z_t | c)` of the noised marginal; at `α = 1, σ = 0` this is the data density.
    pub fn noised_log_density(&self, class_id: usize, zt: &Latent, alpha: f64, sigma: f64) -> Result<f64> {
        let c = self.class(class_id)?;
        self.check_latent(zt)?;
        Ok(zt
            .iter()
            .zip(c.mean.iter().zip(&c.variance))
            .map(|(&z, (&m, &v))| {
                let var = alpha * alpha * v + sigma * sigma;
                let r = z - alpha * m;
                -0.5 * ((2.0 * PI * var).ln() + r * r / var)
            })
            .sum())
    }

    pub fn log_likelihood(&self, class_id: usize, x: &Latent) -> Result<f64> {
        self.noised_log_density(class_id, x, 1.0, 0.0)
    }

    /// `p(c_i | x)`, normalized in log space.
    pub fn bayes_posterior(&self, x: &Latent) -> Result<Vec<f64>> {
        let log_joint = (0..self.classes.len())
            .map(|i| Ok(self.classes[i].prior.ln() + self.log_likelihood(i, x)?))
            .collect::<Result<Vec<_>>>()?;
        posterior_from_log_joint(&log_joint)
    }

    /// Draws a sample of class `class_id` from a seeded stream.
    pub fn sample(&self, class_id: usize, seed: u64, stream: u64) -> Result<Latent> {
        let c = self.class(class_id)?;
        let z = crate::rng::standard_normals(&mut crate::rng::rng(seed, stream), self.dim());
        let data = z
            .iter()
            .zip(c.mean.iter().zip(&c.variance))
            .map(|(e, (m, v))| m + v.sqrt() * e)
            .collect();
        Ok(Latent::from_shape_vec(self.shape, data).expect("validated shape"))
    }
}

/// Softmax of unnormalized log joint probabilities with max subtraction.
pub fn posterior_from_log_joint(log_joint: &[f64]) -> Result<Vec<f64>> {
    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("every class density underflows".into()));
    }
    let w: Vec<f64> = log_joint.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// The optimal denoiser of one class, usable as an ELBO denoiser conditioned
/// on a class index.
#[derive(Debug, Clone)]
pub struct OracleDenoiser<'a> {
    pub model: &'a GaussianClassModel,
    pub schedule: Schedule,
}

impl Denoiser<usize> for OracleDenoiser<'_> {
    fn predict(&self, zt: &Latent, t: f64, class_id: &usize) -> Result<Latent> {
        self.model.optimal_eps(*class_id, zt, t, &self.schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasCase {
    Imbalance,
    Confusion,
    Combined,
}

impl BiasCase {
    pub const ALL: [BiasCase; 3] = [BiasCase::Imbalance, BiasCase::Confusion, BiasCase::Combined];
}

/// A two-class model plus a point drawn "from" class 0 whose Bayes label is class 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasConstruction {
    pub case: BiasCase,
    pub model: GaussianClassModel,
    pub x: Latent,
    pub generating_class: usize,
}

/// One-dimensional, unit-variance constructions of the three misalignment
/// cases: skewed priors, overlapping classes, and both.
pub fn make_bias_case(case: BiasCase) -> BiasConstruction {
    // imbalance: means 0 and 2, priors (0.02, 0.98). The posterior flips at
    // x* = m/2 − ln(p2/p1)/m ≈ −0.946, so x = 0 (the class-0 mode) is labeled 1.
    // confusion: means 0 and 0.1; a point between the means sits near 0.5 and
    // slightly past the midpoint falls to class 1.
    let (priors, m, x) = match case {
        BiasCase::Imbalance => ([0.02, 0.98], 2.0, 0.0),
        BiasCase::Confusion => ([0.5, 0.5], 0.1, 0.06),
        BiasCase::Combined => ([0.02, 0.98], 0.1, 0.06),
    };
    let model = GaussianClassModel::isotropic(vec![vec![0.0], vec![m]], priors.to_vec())
        .expect("static construction is valid");
    BiasConstruction {
        case,
        model,
        x: Latent::from_elem((1, 1, 1), x),
        generating_class: 0,
    }
}
