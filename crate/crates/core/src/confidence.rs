//! Confidence radii for the maximum-likelihood estimate.
//!
//! The data-driven radius
//!
//! ```text
//! B_t(δ;f) = √λ·B
//!          + (1/𝔤)·(√(73·logdet(λ⁻¹H(λ;f))) + √3)·√(log(π²(ρ+1)²/(3δ)))
//!          + (3RK/(𝔤·√λ))·log(π²(ρ+1)²/(3δ))
//! ```
//!
//! bounds ‖g_t(f*) − g_t(f̂_t)‖_{H⁻¹(λ;f*)} uniformly over t with probability
//! 1 − δ; logdet(λ⁻¹H(λ;f)) equals the weighted-Gram log-determinant (twice
//! the weighted information gain) through the determinant identity, so it is
//! computable. The sup over f ∈ 𝓗 of that log-determinant has no
//! computational recipe; [`radius_b_sup`] substitutes the upper bound
//! max{1, R_μ̇/𝔤}·logdet(λ⁻¹K_t(λ)), which replaces the weighted information
//! gain with the unweighted one at the price of the slope factor. The
//! loss-gap radius for optimistic selection is
//! D_t(δ;𝓗) = (1 + 2·R_s·B·K)·B_t(δ;𝓗).

use rand::Rng;
use rayon::prelude::*;

use crate::concentration::{
    bernstein_log_term, rho_from_constants, summarize, ArmAccumulator, CoverageKind,
    CoverageReport, RepOutcome,
};
use crate::ef_models::EfModel;
use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::estimation::{mle_warm, History};
use crate::kernels::{GramMatrix, Kernel};
use crate::seeding;

use nalgebra::{DMatrix, DVector};

/// The constants every radius needs: confidence level, regularization, norm
/// bound B, kernel bound K, noise bound R, and the model constants.
#[derive(Debug, Clone, Copy)]
pub struct ConfidenceConfig {
    pub delta: f64,
    pub lambda: f64,
    pub norm_bound: f64,
    pub kernel_bound: f64,
    pub noise_bound: f64,
    pub g_tau: f64,
    pub self_concordance: f64,
    pub mu_dot_sup: f64,
}

impl ConfidenceConfig {
    pub fn new(
        delta: f64,
        lambda: f64,
        norm_bound: f64,
        kernel: &Kernel,
        model: &EfModel,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::input("delta must be in (0,1)"));
        }
        if !(lambda > 0.0) {
            return Err(Error::input("lambda must be positive"));
        }
        if !(norm_bound > 0.0) {
            return Err(Error::input("norm bound must be positive"));
        }
        Ok(ConfidenceConfig {
            delta,
            lambda,
            norm_bound,
            kernel_bound: kernel.bound(),
            noise_bound: model.noise_bound(),
            g_tau: model.g_tau(),
            self_concordance: model.self_concordance(),
            mu_dot_sup: model.mu_dot_sup(),
        })
    }
}

/// ρ = max{0, ⌈log(8R²K²(t−1)³/λ · log(1 + K²R²/λ))⌉}.
pub fn rho(t: usize, config: &ConfidenceConfig) -> u32 {
    rho_from_constants(t, config.noise_bound, config.kernel_bound, config.lambda)
}

/// Data-driven radius B_t(δ;f) given logdet(λ⁻¹H(λ;f)) = 2·Γ̃_t(f).
pub fn radius_b(t: usize, config: &ConfidenceConfig, logdet_weighted: f64) -> f64 {
    let log_term = bernstein_log_term(rho(t, config), config.delta);
    config.lambda.sqrt() * config.norm_bound
        + ((73.0 * logdet_weighted).sqrt() + 3.0_f64.sqrt()) * log_term.sqrt() / config.g_tau
        + 3.0 * config.noise_bound * config.kernel_bound / (config.g_tau * config.lambda.sqrt())
            * log_term
}

/// Sup-relaxed radius B_t(δ;𝓗): substitutes max{1, R_μ̇/𝔤}·logdet(λ⁻¹K_t(λ))
/// for the intractable supremum of the weighted log-determinant.
pub fn radius_b_sup(t: usize, config: &ConfidenceConfig, logdet_unweighted: f64) -> f64 {
    let factor = (config.mu_dot_sup / config.g_tau).max(1.0);
    radius_b(t, config, factor * logdet_unweighted)
}

/// Loss-gap radius D_t(δ;𝓗) = (1 + 2·R_s·B·K)·B_t(δ;𝓗).
pub fn radius_d(t: usize, config: &ConfidenceConfig, logdet_unweighted: f64) -> f64 {
    (1.0 + 2.0 * config.self_concordance * config.norm_bound * config.kernel_bound)
        * radius_b_sup(t, config, logdet_unweighted)
}

/// Diagnostic only: the analysis radius β_t(δ;f) with the maximal weighted
/// information gain γ̃_t(f) replaced by the data-driven Γ̃_t(f) (no recipe for
/// the maximal version exists). Not used for decisions.
pub fn beta_radius_diagnostic(t: usize, config: &ConfidenceConfig, info_gain_weighted: f64) -> f64 {
    let log_term = bernstein_log_term(rho(t, config), config.delta);
    config.lambda.sqrt() * config.norm_bound
        + ((146.0 * info_gain_weighted).sqrt() + 3.0_f64.sqrt()) * log_term.sqrt() / config.g_tau
        + 3.0 * config.noise_bound * config.kernel_bound / (config.g_tau * config.lambda.sqrt())
            * log_term
}

/// Monte-Carlo check of the good event on a known-f* instance: with
/// uniform-random decisions, verify
/// ‖g_t(f*) − g_t(f̂_t)‖_{H⁻¹(λ;f*)} ≤ B_t(δ;f*) uniformly over t ≤ T.
///
/// The difference vector is formed exactly (no optimality shortcut):
/// g_t(f*) − g_t(f̂) = Σ_s [(μ(f*(x_s)) − μ(f̂(x_s)))/𝔤 − λα̂_s]·φ(x_s)
///                   + λ·Σ_i c*_i·φ(z_i),
/// supported on the visited arms and the ground-truth anchors, and its
/// H⁻¹-norm is evaluated in the dual on that finite support.
pub fn good_event_coverage(
    env: &Environment,
    replications: usize,
    horizon: usize,
    delta: f64,
    lambda: f64,
    master_seed: u64,
    bound_multiplier: f64,
) -> Result<CoverageReport> {
    let kernel = env.f_star().kernel().clone();
    let model = *env.model();
    let config = ConfidenceConfig::new(delta, lambda, env.norm_bound(), &kernel, &model)?;
    let arms = env.decision_set().to_vec();
    let anchors = env.f_star().support().to_vec();
    let a = arms.len();
    let m = anchors.len();

    // Gram over arms ∪ anchors, built once.
    let mut combined = arms.clone();
    combined.extend(anchors.iter().cloned());
    let k_small = GramMatrix::new(&kernel, &combined, lambda)?
        .entries()
        .clone();
    let k_arms = k_small.view((0, 0), (a, a)).into_owned();

    let f_star_vals = env.f_star_values().to_vec();
    let anchor_coeffs: Vec<f64> = env.f_star().coeffs().iter().cloned().collect();

    let per_rep: Vec<RepOutcome> = (0..replications)
        .into_par_iter()
        .map(|rep| -> Result<RepOutcome> {
            let mut rng = seeding::derive_rng(master_seed, "good-event", rep as u64);
            let mut history = History::new(kernel.clone());
            let mut hist_arms: Vec<usize> = Vec::new();
            let mut warm: Vec<f64> = Vec::new();
            let mut held = true;
            let mut max_ratio = f64::NEG_INFINITY;

            for round in 1..=horizon {
                // Fit on the first round−1 samples.
                let fit = mle_warm(&history, &model, lambda, Some(&warm))?;
                warm = fit.f.coeffs().iter().cloned().collect();

                // f̂ at the arms through per-arm coefficient sums.
                let mut z = DVector::zeros(a);
                for (s, &arm) in hist_arms.iter().enumerate() {
                    z[arm] += warm[s];
                }
                let f_hat_arms = &k_arms * &z;

                // Difference-vector coefficients on arms ∪ anchors.
                let mut coeff = DVector::zeros(a + m);
                for arm in 0..a {
                    let counts = hist_arms.iter().filter(|&&x| x == arm).count() as f64;
                    coeff[arm] = counts * (model.mu(f_star_vals[arm]) - model.mu(f_hat_arms[arm]))
                        / model.g_tau()
                        - lambda * z[arm];
                }
                for i in 0..m {
                    coeff[a + i] = lambda * anchor_coeffs[i];
                }

                // Dual norm against H(λ;f*) with per-arm mass n_a·μ̇(f*)/𝔤.
                let q = &k_small * &coeff;
                let term1 = q.dot(&coeff);
                let mut mass = vec![0.0; a];
                for &arm in &hist_arms {
                    mass[arm] += model.mu_dot(f_star_vals[arm]) / model.g_tau();
                }
                let mut sys = DMatrix::zeros(a, a);
                for i in 0..a {
                    for j in 0..a {
                        sys[(i, j)] = k_arms[(i, j)] * mass[j];
                    }
                    sys[(i, i)] += lambda;
                }
                let q_arms = DVector::from_iterator(a, (0..a).map(|i| q[i]));
                let x = sys
                    .lu()
                    .solve(&q_arms)
                    .ok_or_else(|| Error::numerical("singular good-event system"))?;
                let term2 = (0..a).map(|i| q_arms[i] * mass[i] * x[i]).sum::<f64>();
                let stat = (((term1 - term2) / lambda).max(0.0)).sqrt();

                // Radius at the weighted log-det of H(λ;f*).
                let mut acc = ArmAccumulator::new(k_arms.clone());
                for &arm in &hist_arms {
                    acc.push(arm, 0.0, model.mu_dot(f_star_vals[arm]) / model.g_tau());
                }
                let logdet = acc.log_det(lambda)?;
                let radius = radius_b(round, &config, logdet) * bound_multiplier;

                let ratio = stat / radius;
                max_ratio = max_ratio.max(ratio);
                if stat > radius {
                    held = false;
                }

                // Play a uniform-random arm and record the reward.
                let arm = rng.gen_range(0..a);
                let y = env.step(arm, &mut rng)?;
                history.push(arms[arm].clone(), y)?;
                hist_arms.push(arm);
                warm.push(0.0);
            }
            Ok(RepOutcome {
                replication: rep,
                held,
                max_ratio,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(CoverageKind::GoodEvent, horizon, delta, per_rep))
}
