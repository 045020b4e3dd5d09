//! Self-normalized concentration bounds and their Monte-Carlo verification.
//!
//! Two inequalities are implemented as executable functions:
//!
//! - a data-driven Freedman inequality: for a martingale difference sequence
//!   z_s ≤ R a.s. with a predictable variance proxy v_t,
//!   Σ z_s ≤ √(2·max{v₀, η·v_t}·log(π²(ℓ̂+1)²/(6δ))) + (R/3)·log(π²(ℓ̂+1)²/(6δ))
//!   with ℓ̂ = max{0, ⌈log_η(v_t/v₀)⌉}, uniformly over t with probability
//!   1 − δ ([`stitched_freedman_bound`]);
//!
//! - a Bernstein-like dimension-free self-normalized bound on
//!   ‖S_t‖_{H⁻¹(λ)} for S_t = Σ ε_s φ(x_s) and the variance-weighted
//!   operator H(λ) = Σ σ_s² φ(x_s)φ(x_s)ᵀ + λI ([`bernstein_bound`]).
//!
//! The statistic ‖S_t‖_{H⁻¹(λ)} is evaluated exactly in the dual without ever
//! forming features: by the Woodbury identity
//! (λI + Φ̃ᵀΦ̃)⁻¹ = λ⁻¹(I − Φ̃ᵀ(λI + Φ̃Φ̃ᵀ)⁻¹Φ̃) with Φ̃ = diag(σ)Φ,
//!
//! ```text
//! ‖S_t‖²_{H⁻¹(λ)} = λ⁻¹·(εᵀKε − εᵀK·diag(σ)·(λI + K̃)⁻¹·diag(σ)·K·ε)
//! ```
//!
//! where K̃ = diag(σ)·K·diag(σ). [`dual_sqnorm`] generalizes this to any
//! vector supported on a finite point set, which the good-event check needs
//! (its vector also has mass on the ground-truth anchors).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, Kernel, WeightedGramMatrix};
use crate::seeding;

/// Geometric stitching grid parameters (η > 1, v₀ > 0).
#[derive(Debug, Clone, Copy)]
pub struct StitchingParams {
    pub eta: f64,
    pub v0: f64,
}

impl Default for StitchingParams {
    fn default() -> Self {
        // The self-normalized bound's own instantiation.
        StitchingParams {
            eta: std::f64::consts::E,
            v0: 1.0,
        }
    }
}

impl StitchingParams {
    pub fn new(eta: f64, v0: f64) -> Result<Self> {
        if !(eta > 1.0) {
            return Err(Error::input("stitching eta must exceed 1"));
        }
        if !(v0 > 0.0) {
            return Err(Error::input("stitching v0 must be positive"));
        }
        Ok(StitchingParams { eta, v0 })
    }
}

/// A realized martingale path: increments, conditional-variance proxies and
/// the almost-sure bound R.
#[derive(Debug, Clone)]
pub struct MartingaleTrace {
    increments: Vec<f64>,
    variance_proxies: Vec<f64>,
    noise_bound: f64,
}

impl MartingaleTrace {
    pub fn new(increments: Vec<f64>, variance_proxies: Vec<f64>, noise_bound: f64) -> Result<Self> {
        if increments.len() != variance_proxies.len() {
            return Err(Error::input("increments and proxies lengths differ"));
        }
        if !(noise_bound > 0.0) {
            return Err(Error::input("noise bound must be positive"));
        }
        if increments.iter().any(|z| z.abs() > noise_bound + 1e-12) {
            return Err(Error::input("increment exceeds the almost-sure bound"));
        }
        if variance_proxies.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::input("variance proxies must be nonnegative"));
        }
        Ok(MartingaleTrace {
            increments,
            variance_proxies,
            noise_bound,
        })
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn variance_proxies(&self) -> &[f64] {
        &self.variance_proxies
    }

    pub fn noise_bound(&self) -> f64 {
        self.noise_bound
    }
}

/// Stitched Freedman bound at proxy level v_t, uniform over t w.p. 1 − δ.
pub fn stitched_freedman_bound(
    v_t: f64,
    noise_bound: f64,
    delta: f64,
    params: &StitchingParams,
) -> f64 {
    let ell_hat = if v_t <= params.v0 {
        0.0
    } else {
        ((v_t / params.v0).ln() / params.eta.ln()).ceil().max(0.0)
    };
    let log_term = (std::f64::consts::PI.powi(2) * (ell_hat + 1.0).powi(2) / (6.0 * delta)).ln();
    (2.0 * params.v0.max(params.eta * v_t) * log_term).sqrt() + noise_bound / 3.0 * log_term
}

/// ρ index of the self-normalized bound:
/// max{0, ⌈log(8R²K²(t−1)³/λ · log(1 + K²R²/λ))⌉}.
pub fn rho_from_constants(t: usize, noise_bound: f64, kernel_bound: f64, lambda: f64) -> u32 {
    debug_assert!(t >= 1);
    let n = (t - 1) as f64;
    let inner = 8.0 * noise_bound.powi(2) * kernel_bound.powi(2) * n.powi(3) / lambda
        * (1.0 + kernel_bound.powi(2) * noise_bound.powi(2) / lambda).ln();
    if inner <= 0.0 {
        return 0;
    }
    inner.ln().ceil().max(0.0) as u32
}

/// log(π²(ρ+1)²/(3δ)).
pub(crate) fn bernstein_log_term(rho: u32, delta: f64) -> f64 {
    (std::f64::consts::PI.powi(2) * ((rho + 1) as f64).powi(2) / (3.0 * delta)).ln()
}

/// The Bernstein-like dimension-free self-normalized bound on ‖S_t‖_{H⁻¹(λ)}:
/// (√(73·logdet) + √3)·√(log(π²(ρ+1)²/(3δ))) + (3RK/√λ)·log(π²(ρ+1)²/(3δ)),
/// with logdet = log det(λ⁻¹H_t(λ)).
pub fn bernstein_bound(
    t: usize,
    logdet_weighted: f64,
    noise_bound: f64,
    kernel_bound: f64,
    lambda: f64,
    delta: f64,
) -> f64 {
    let rho = rho_from_constants(t, noise_bound, kernel_bound, lambda);
    let log_term = bernstein_log_term(rho, delta);
    ((73.0 * logdet_weighted).sqrt() + 3.0_f64.sqrt()) * log_term.sqrt()
        + 3.0 * noise_bound * kernel_bound / lambda.sqrt() * log_term
}

/// ‖Σ_p coeffs[p]·φ(support[p])‖²_{H⁻¹(λ)} for
/// H(λ) = Σ_s weights[s]²·φ(op_points[s])φ(op_points[s])ᵀ + λI,
/// evaluated entirely in the dual:
/// (aᵀK_ss a − bᵀ(λI + K̃)⁻¹b)/λ with b = diag(w)·K_os·a.
pub fn dual_sqnorm(
    kernel: &Kernel,
    support: &[Vec<f64>],
    coeffs: &[f64],
    op_points: &[Vec<f64>],
    op_weights: &[f64],
    lambda: f64,
) -> Result<f64> {
    if support.len() != coeffs.len() {
        return Err(Error::input("support and coeffs lengths differ"));
    }
    if op_points.len() != op_weights.len() {
        return Err(Error::input("operator points and weights lengths differ"));
    }
    if !(lambda > 0.0) {
        return Err(Error::input("lambda must be positive"));
    }
    let n = support.len();
    let m = op_points.len();
    let a = DVector::from_column_slice(coeffs);

    let mut k_ss = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(&support[i], &support[j])?;
            k_ss[(i, j)] = v;
            k_ss[(j, i)] = v;
        }
    }
    let term1 = (&k_ss * &a).dot(&a);
    if m == 0 {
        return Ok((term1 / lambda).max(0.0));
    }

    let mut k_os = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            k_os[(i, j)] = kernel.eval(&op_points[i], &support[j])?;
        }
    }
    let mut b = &k_os * &a;
    for i in 0..m {
        b[i] *= op_weights[i];
    }

    let op_gram = GramMatrix::new(kernel, op_points, lambda)?;
    let weighted = WeightedGramMatrix::new(&op_gram, op_weights)?;
    let solved = weighted.solve_regularized(&b);
    let term2 = b.dot(&solved);
    Ok(((term1 - term2) / lambda).max(0.0))
}

/// ‖S_t‖_{H⁻¹(λ)} with S_t = Σ_s ε_s φ(x_s) and σ_s² the trace's variance
/// proxies; exact dual evaluation, no features formed.
pub fn self_norm_statistic(
    trace: &MartingaleTrace,
    points: &[Vec<f64>],
    kernel: &Kernel,
    lambda: f64,
) -> Result<f64> {
    if points.len() != trace.len() {
        return Err(Error::input("points length must match trace length"));
    }
    let sigmas: Vec<f64> = trace.variance_proxies.iter().map(|v| v.sqrt()).collect();
    Ok(dual_sqnorm(kernel, points, &trace.increments, points, &sigmas, lambda)?.sqrt())
}

/// The two deterministic envelope inequalities:
/// ‖S_t‖²_{H⁻¹(λ)} ≤ (t−1)²K²R²/λ and
/// log det(λ⁻¹H_t(λ)) ≤ (t−1)·log(1 + K²R²/λ), evaluated with 1e-9 slack.
pub fn sanity_bounds(
    trace: &MartingaleTrace,
    points: &[Vec<f64>],
    kernel: &Kernel,
    lambda: f64,
) -> Result<(bool, bool)> {
    let n = trace.len() as f64;
    let r = trace.noise_bound();
    let k = kernel.bound();
    let stat = self_norm_statistic(trace, points, kernel, lambda)?;
    let first = stat.powi(2) <= n.powi(2) * k.powi(2) * r.powi(2) / lambda + 1e-9;

    let logdet = if trace.is_empty() {
        0.0
    } else {
        let gram = GramMatrix::new(kernel, points, lambda)?;
        let sigmas: Vec<f64> = trace.variance_proxies.iter().map(|v| v.sqrt()).collect();
        WeightedGramMatrix::new(&gram, &sigmas)?.log_det_ratio()
    };
    let second = logdet <= n * (1.0 + k.powi(2) * r.powi(2) / lambda).ln() + 1e-9;
    Ok((first, second))
}

/// Which inequality a coverage experiment verifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageKind {
    /// Data-driven Freedman on Rademacher increments, proxy v_t = t·R².
    StitchedFreedman,
    /// Bernstein-like self-normalized bound on an exponential-family instance
    /// with known ground truth and uniform-random decisions.
    BernsteinSelfNorm,
    /// The good event: ‖g_t(f*) − g_t(f̂_t)‖_{H⁻¹(λ;f*)} ≤ B_t(δ;f*) for all t.
    GoodEvent,
}

/// Per-replication outcome: did the bound hold uniformly over t, and the
/// worst statistic/bound ratio observed along the path.
#[derive(Debug, Clone, Serialize)]
pub struct RepOutcome {
    pub replication: usize,
    pub held: bool,
    pub max_ratio: f64,
}

/// Aggregate coverage report for one inequality.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub kind: CoverageKind,
    pub replications: usize,
    pub horizon: usize,
    pub delta: f64,
    pub held_count: usize,
    pub coverage: f64,
    pub mean_tightness: f64,
    pub tightness_p50: f64,
    pub tightness_p90: f64,
    pub tightness_max: f64,
    #[serde(skip)]
    pub per_rep: Vec<RepOutcome>,
}

pub(crate) fn summarize(
    kind: CoverageKind,
    horizon: usize,
    delta: f64,
    mut per_rep: Vec<RepOutcome>,
) -> CoverageReport {
    per_rep.sort_by_key(|r| r.replication);
    let m = per_rep.len();
    let held = per_rep.iter().filter(|r| r.held).count();
    let mut ratios: Vec<f64> = per_rep.iter().map(|r| r.max_ratio).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        if ratios.is_empty() {
            return f64::NAN;
        }
        let idx = ((ratios.len() as f64 - 1.0) * p).round() as usize;
        ratios[idx]
    };
    CoverageReport {
        kind,
        replications: m,
        horizon,
        delta,
        held_count: held,
        coverage: held as f64 / m.max(1) as f64,
        mean_tightness: ratios.iter().sum::<f64>() / m.max(1) as f64,
        tightness_p50: q(0.5),
        tightness_p90: q(0.9),
        tightness_max: ratios.last().cloned().unwrap_or(f64::NAN),
        per_rep,
    }
}

/// Configuration for [`coverage_experiment`].
#[derive(Debug, Clone)]
pub struct CoverageSpec<'a> {
    pub kind: CoverageKind,
    pub replications: usize,
    pub horizon: usize,
    pub delta: f64,
    pub lambda: f64,
    /// Instance for the kernelized suites; ignored by the Freedman suite.
    pub environment: Option<&'a Environment>,
    /// Noise bound for the Freedman suite.
    pub noise_bound: f64,
    pub stitching: StitchingParams,
    pub master_seed: u64,
    /// Test-only negative control: multiplies every bound (1.0 = faithful).
    pub bound_multiplier: f64,
}

/// Run a seeded coverage experiment for the named inequality. Replications
/// are embarrassingly parallel; each owns an RNG stream derived from the
/// master seed.
pub fn coverage_experiment(spec: &CoverageSpec) -> Result<CoverageReport> {
    if spec.replications == 0 || spec.horizon == 0 {
        return Err(Error::input("need at least one replication and one round"));
    }
    if !(spec.delta > 0.0 && spec.delta < 1.0) {
        return Err(Error::input("delta must be in (0,1)"));
    }
    match spec.kind {
        CoverageKind::StitchedFreedman => freedman_coverage(spec),
        CoverageKind::BernsteinSelfNorm => bernstein_coverage(spec),
        CoverageKind::GoodEvent => {
            let env = spec
                .environment
                .ok_or_else(|| Error::input("good-event suite needs an environment"))?;
            crate::confidence::good_event_coverage(
                env,
                spec.replications,
                spec.horizon,
                spec.delta,
                spec.lambda,
                spec.master_seed,
                spec.bound_multiplier,
            )
        }
    }
}

fn freedman_coverage(spec: &CoverageSpec) -> Result<CoverageReport> {
    let r = spec.noise_bound;
    if !(r > 0.0) {
        return Err(Error::input("freedman suite needs a positive noise bound"));
    }
    let per_rep: Vec<RepOutcome> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seeding::derive_rng(spec.master_seed, "freedman", rep as u64);
            let mut sum = 0.0;
            let mut held = true;
            let mut max_ratio = f64::NEG_INFINITY;
            for t in 1..=spec.horizon {
                let z = if rng.gen::<bool>() { r } else { -r };
                sum += z;
                let v_t = t as f64 * r * r;
                let bound = stitched_freedman_bound(v_t, r, spec.delta, &spec.stitching)
                    * spec.bound_multiplier;
                let ratio = sum / bound;
                max_ratio = max_ratio.max(ratio);
                if sum > bound {
                    held = false;
                }
            }
            RepOutcome {
                replication: rep,
                held,
                max_ratio,
            }
        })
        .collect();
    Ok(summarize(spec.kind, spec.horizon, spec.delta, per_rep))
}

/// Per-arm running sums that make the self-normalized statistic O(A³) per
/// round on a finite decision set: with per-arm aggregated noise e_a = Σ ε_s
/// and weight mass m_a = Σ σ_s²,
/// ‖S‖² = (eᵀK_A e − qᵀ·diag(m)·(λI + K_A·diag(m))⁻¹·q)/λ with q = K_A e;
/// matches the dense formula exactly (cross-checked in tests).
pub(crate) struct ArmAccumulator {
    gram: DMatrix<f64>,
    eps_sum: DVector<f64>,
    mass: DVector<f64>,
}

impl ArmAccumulator {
    pub(crate) fn new(gram: DMatrix<f64>) -> Self {
        let a = gram.nrows();
        ArmAccumulator {
            gram,
            eps_sum: DVector::zeros(a),
            mass: DVector::zeros(a),
        }
    }

    pub(crate) fn push(&mut self, arm: usize, eps: f64, variance: f64) {
        self.eps_sum[arm] += eps;
        self.mass[arm] += variance;
    }

    pub(crate) fn statistic(&self, lambda: f64) -> Result<f64> {
        let a = self.gram.nrows();
        let q = &self.gram * &self.eps_sum;
        let term1 = q.dot(&self.eps_sum);
        let mut sys = DMatrix::zeros(a, a);
        for i in 0..a {
            for j in 0..a {
                sys[(i, j)] = self.gram[(i, j)] * self.mass[j];
            }
            sys[(i, i)] += lambda;
        }
        let x = sys
            .lu()
            .solve(&q)
            .ok_or_else(|| Error::numerical("singular system in self-norm statistic"))?;
        let term2 = (0..a).map(|i| q[i] * self.mass[i] * x[i]).sum::<f64>();
        Ok((((term1 - term2) / lambda).max(0.0)).sqrt())
    }

    pub(crate) fn log_det(&self, lambda: f64) -> Result<f64> {
        let a = self.gram.nrows();
        let mut sys = DMatrix::identity(a, a);
        for i in 0..a {
            for j in 0..a {
                sys[(i, j)] += self.gram[(i, j)] * self.mass[j] / lambda;
            }
        }
        let det: f64 = sys.lu().determinant();
        if !(det > 0.0) {
            return Err(Error::numerical("nonpositive determinant"));
        }
        Ok(det.ln())
    }
}

fn bernstein_coverage(spec: &CoverageSpec) -> Result<CoverageReport> {
    let env = spec
        .environment
        .ok_or_else(|| Error::input("bernstein suite needs an environment"))?;
    let kernel = env.f_star().kernel().clone();
    let arm_gram = GramMatrix::new(&kernel, env.decision_set(), spec.lambda)?;
    let model = *env.model();
    let r = model.noise_bound();
    let k = kernel.bound();

    let per_rep: Vec<RepOutcome> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| -> Result<RepOutcome> {
            let mut rng = seeding::derive_rng(spec.master_seed, "bernstein", rep as u64);
            let mut acc = ArmAccumulator::new(arm_gram.entries().clone());
            let mut held = true;
            let mut max_ratio = f64::NEG_INFINITY;
            for round in 1..=spec.horizon {
                // Statistic and bound after round−1 samples (S_t sums t−1 terms).
                let stat = acc.statistic(spec.lambda)?;
                let logdet = acc.log_det(spec.lambda)?;
                let bound = bernstein_bound(round, logdet, r, k, spec.lambda, spec.delta)
                    * spec.bound_multiplier;
                let ratio = stat / bound;
                max_ratio = max_ratio.max(ratio);
                if stat > bound {
                    held = false;
                }
                // Predictable uniform-random decision, then observe.
                let arm = rng.gen_range(0..env.num_arms());
                let z = env.f_star_values()[arm];
                let y = env.step(arm, &mut rng)?;
                let eps = y - model.mu(z);
                let variance = model.g_tau() * model.mu_dot(z);
                acc.push(arm, eps, variance);
            }
            Ok(RepOutcome {
                replication: rep,
                held,
                max_ratio,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(spec.kind, spec.horizon, spec.delta, per_rep))
}
