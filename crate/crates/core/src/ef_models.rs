//! Canonical exponential-family reward models.
//!
//! A reward y given a score z = f(x) has density
//! exp((y·z − m(z))/𝔤(τ) + h(y,τ)), so E[y] = μ(z) with μ = m' and
//! Var[y] = 𝔤(τ)·μ̇(z). Gaussian and Bernoulli ship as first-class models;
//! Poisson/exponential rewards violate the almost-sure bounded-noise
//! assumption without truncation and are left as an extension point
//! (truncation would bias both moments). The base-measure term h(y,τ) plays
//! no computational role and is not represented.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// Gaussian noise with variance σ²; identity link, 𝔤(τ) = σ².
    Gaussian { variance: f64 },
    /// Bernoulli rewards; logistic link, 𝔤(τ) = 1.
    Bernoulli,
}

/// An exponential-family model together with its working constants:
/// dispersion 𝔤(τ), almost-sure noise bound R, self-concordance constant R_s
/// and the global slope bound R_μ̇ = sup μ̇.
#[derive(Debug, Clone, Copy)]
pub struct EfModel {
    kind: ModelKind,
    g_tau: f64,
    noise_bound: f64,
    self_concordance: f64,
    mu_dot_sup: f64,
}

impl EfModel {
    pub fn bernoulli() -> Self {
        EfModel {
            kind: ModelKind::Bernoulli,
            g_tau: 1.0,
            noise_bound: 1.0,
            self_concordance: 1.0,
            mu_dot_sup: 0.25,
        }
    }

    /// Gaussian model with an explicit almost-sure noise bound R. The sampler
    /// truncates to [μ(z) − R, μ(z) + R] so the bounded-noise assumption holds
    /// literally.
    pub fn gaussian(variance: f64, noise_bound: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::input(format!(
                "gaussian variance must be positive, got {variance}"
            )));
        }
        if !(noise_bound > 0.0) {
            return Err(Error::input("noise bound must be positive"));
        }
        Ok(EfModel {
            kind: ModelKind::Gaussian { variance },
            g_tau: variance,
            noise_bound,
            self_concordance: 0.0,
            mu_dot_sup: 1.0,
        })
    }

    /// Gaussian model with R = σ·√(2·log(2T/δ)), which keeps |ε_t| ≤ R
    /// uniformly over a horizon of T rounds with probability 1 − δ for
    /// untruncated noise; the sampler truncates at that R.
    pub fn gaussian_for_horizon(variance: f64, horizon: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::input("delta must be in (0, 1)"));
        }
        if horizon == 0 {
            return Err(Error::input("horizon must be at least 1"));
        }
        let sigma = variance.sqrt();
        let r = sigma * (2.0 * (2.0 * horizon as f64 / delta).ln()).sqrt();
        EfModel::gaussian(variance, r)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Dispersion 𝔤(τ).
    pub fn g_tau(&self) -> f64 {
        self.g_tau
    }

    /// Almost-sure bound R on |y − μ(z)|.
    pub fn noise_bound(&self) -> f64 {
        self.noise_bound
    }

    /// Self-concordance constant R_s with |μ̈| ≤ R_s·μ̇.
    pub fn self_concordance(&self) -> f64 {
        self.self_concordance
    }

    /// R_μ̇ = sup_z μ̇(z).
    pub fn mu_dot_sup(&self) -> f64 {
        self.mu_dot_sup
    }

    /// Inverse link function μ = m'.
    pub fn mu(&self, z: f64) -> f64 {
        match self.kind {
            ModelKind::Gaussian { .. } => z,
            ModelKind::Bernoulli => sigmoid(z),
        }
    }

    /// μ̇; for Bernoulli this is μ(z)(1 − μ(z)) ∈ (0, 1/4].
    pub fn mu_dot(&self, z: f64) -> f64 {
        match self.kind {
            ModelKind::Gaussian { .. } => 1.0,
            ModelKind::Bernoulli => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    /// μ̈; for Bernoulli this is μ̇(z)(1 − 2μ(z)).
    pub fn mu_ddot(&self, z: f64) -> f64 {
        match self.kind {
            ModelKind::Gaussian { .. } => 0.0,
            ModelKind::Bernoulli => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }

    /// Log-partition function m (convex, m' = μ).
    pub fn log_partition(&self, z: f64) -> f64 {
        match self.kind {
            ModelKind::Gaussian { .. } => 0.5 * z * z,
            // log(1 + e^z), stable for large |z|.
            ModelKind::Bernoulli => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Draw a reward with E[y] = μ(z). Gaussian samples are rejection-resampled
    /// into [μ(z) − R, μ(z) + R].
    pub fn sample<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> f64 {
        match self.kind {
            ModelKind::Bernoulli => {
                if rng.gen::<f64>() < sigmoid(z) {
                    1.0
                } else {
                    0.0
                }
            }
            ModelKind::Gaussian { variance } => {
                let mean = z;
                let normal = Normal::new(mean, variance.sqrt()).expect("valid normal");
                loop {
                    let y = normal.sample(rng);
                    if (y - mean).abs() <= self.noise_bound {
                        return y;
                    }
                }
            }
        }
    }

    /// Problem-difficulty constants from the ground-truth scores over the
    /// decision set: κ* = 1/μ̇(values[0]) where values[0] is the score at the
    /// optimal decision, and κ_X = max over all values of 1/μ̇. A vanishing
    /// slope is reported as +∞.
    pub fn kappa_constants(&self, values: &[f64]) -> Result<(f64, f64)> {
        if values.is_empty() {
            return Err(Error::input("kappa constants need at least one value"));
        }
        let inv = |z: f64| {
            let d = self.mu_dot(z);
            if d > 0.0 {
                1.0 / d
            } else {
                eprintln!(
                    "warning: vanishing inverse-link slope at z = {z}; kappa reported as +inf"
                );
                f64::INFINITY
            }
        };
        let kappa_star = inv(values[0]);
        let kappa_x = values
            .iter()
            .cloned()
            .map(inv)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((kappa_star, kappa_x))
    }
}

/// Numerically stable logistic function.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
