//! Ridge-regularized maximum-likelihood estimation in dual coordinates.
//!
//! By the generalized representer theorem the minimizer of the
//! ridge-regularized negative log-likelihood lies in the span of
//! k(·, x_s) over the observed points, so the optimization runs over the
//! coefficient vector α with f(·) = Σ_s α_s k(·, x_s). Writing v = Kα for the
//! fitted scores, the loss, its gradient and Hessian in α are
//!
//! ```text
//! L(α)  = Σ_s (−y_s v_s + m(v_s))/𝔤 + (λ/2)·αᵀKα
//! ∇L    = K·r,            r = (μ(v) − y)/𝔤 + λα
//! ∇²L   = K·D·K/𝔤 + λK,   D = diag(μ̇(v))
//! ```
//!
//! Newton solves the reduced system (D·K/𝔤 + λI)Δ = r: any such Δ satisfies
//! (∇²L)Δ = ∇L, and the residual r — not the gradient K·r — is the
//! convergence criterion, which sidesteps factorizing a possibly singular K
//! (duplicated decision points need no special handling). The backtracking
//! line search uses the merit ½‖r‖², whose directional derivative along the
//! Newton direction is exactly −‖r‖²; the loss itself is flat along null(K)
//! components of the step.
//!
//! Histories drawn from a finite decision set repeat points, so K = E·K_u·Eᵀ
//! for the Gram K_u of the distinct support and the 0/1 incidence E. The
//! reduced system is then solved exactly through the Woodbury identity at
//! O(t + u³) per iteration instead of O(t³); with all points distinct this
//! degenerates to the plain dense solve.

use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::ef_models::EfModel;
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, Kernel};

/// Residual tolerance for the Newton solvers.
pub const NEWTON_TOL: f64 = 1e-8;
/// Iteration cap for the Newton solvers.
pub const NEWTON_MAX_ITER: usize = 100;
const ARMIJO_C: f64 = 1e-4;

/// An RKHS element in representer form: f(·) = Σ_s coeffs[s]·k(·, support[s]).
#[derive(Debug, Clone)]
pub struct DualFunction {
    support: Vec<Vec<f64>>,
    coeffs: DVector<f64>,
    kernel: Kernel,
}

impl DualFunction {
    pub fn new(support: Vec<Vec<f64>>, coeffs: Vec<f64>, kernel: Kernel) -> Result<Self> {
        if support.len() != coeffs.len() {
            return Err(Error::input("support and coefficient lengths differ"));
        }
        Ok(DualFunction {
            support,
            coeffs: DVector::from_vec(coeffs),
            kernel,
        })
    }

    /// The zero function (empty support).
    pub fn zero(kernel: Kernel) -> Self {
        DualFunction {
            support: Vec::new(),
            coeffs: DVector::zeros(0),
            kernel,
        }
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let mut v = 0.0;
        for (p, c) in self.support.iter().zip(self.coeffs.iter()) {
            v += c * self.kernel.eval(x, p)?;
        }
        Ok(v)
    }

    /// ‖f‖² = αᵀKα.
    pub fn rkhs_norm_sq(&self) -> Result<f64> {
        let n = self.support.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += self.coeffs[i]
                    * self.coeffs[j]
                    * self.kernel.eval(&self.support[i], &self.support[j])?;
            }
        }
        Ok(s)
    }
}

/// Observed decision/reward pairs with the distinct-support compression and a
/// lazily materialized full Gram matrix.
#[derive(Debug)]
pub struct History {
    kernel: Kernel,
    points: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    distinct: Vec<Vec<f64>>,
    index: Vec<usize>,
    key_map: HashMap<Vec<u64>, usize>,
    gram_small: DMatrix<f64>,
    full_gram: RefCell<Option<GramMatrix>>,
}

fn point_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

impl History {
    pub fn new(kernel: Kernel) -> Self {
        History {
            kernel,
            points: Vec::new(),
            rewards: Vec::new(),
            distinct: Vec::new(),
            index: Vec::new(),
            key_map: HashMap::new(),
            gram_small: DMatrix::zeros(0, 0),
            full_gram: RefCell::new(None),
        }
    }

    pub fn with_data(kernel: Kernel, points: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        if points.len() != rewards.len() {
            return Err(Error::input("points and rewards lengths differ"));
        }
        let mut h = History::new(kernel);
        for (p, y) in points.into_iter().zip(rewards) {
            h.push(p, y)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, point: Vec<f64>, reward: f64) -> Result<()> {
        let key = point_key(&point);
        let idx = match self.key_map.get(&key) {
            Some(&i) => i,
            None => {
                let u = self.distinct.len();
                let mut grown = DMatrix::zeros(u + 1, u + 1);
                grown.view_mut((0, 0), (u, u)).copy_from(&self.gram_small);
                for j in 0..u {
                    let v = self.kernel.eval(&point, &self.distinct[j])?;
                    grown[(u, j)] = v;
                    grown[(j, u)] = v;
                }
                grown[(u, u)] = self.kernel.eval(&point, &point)?;
                self.gram_small = grown;
                self.distinct.push(point.clone());
                self.key_map.insert(key, u);
                u
            }
        };
        self.index.push(idx);
        self.points.push(point);
        self.rewards.push(reward);
        self.full_gram.replace(None);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Distinct support points in first-seen order.
    pub fn distinct(&self) -> &[Vec<f64>] {
        &self.distinct
    }

    /// Map from history row to distinct-support index.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// Gram of the distinct support (no regularization).
    pub fn gram_small(&self) -> &DMatrix<f64> {
        &self.gram_small
    }

    /// Full t×t Gram matrix of the history in order, factored at λ.
    /// Built on demand and cached until the next push.
    pub fn gram(&self, lambda: f64) -> Result<GramMatrix> {
        if let Some(g) = self.full_gram.borrow().as_ref() {
            if g.lambda() == lambda {
                return Ok(g.clone());
            }
        }
        let t = self.len();
        let mut entries = DMatrix::zeros(t, t);
        for i in 0..t {
            for j in 0..t {
                entries[(i, j)] = self.gram_small[(self.index[i], self.index[j])];
            }
        }
        let g = GramMatrix::from_entries(entries, lambda)?;
        self.full_gram.replace(Some(g.clone()));
        Ok(g)
    }

    /// log det(λ⁻¹(λI_t + K_t)) via the Sylvester identity
    /// det(I_t + λ⁻¹E K_u Eᵀ) = det(I_u + λ⁻¹K_u EᵀE), so the cost is O(u³)
    /// regardless of t.
    pub fn log_det_ratio_unweighted(&self, lambda: f64) -> Result<f64> {
        let mut counts = vec![0.0; self.distinct.len()];
        for &i in &self.index {
            counts[i] += 1.0;
        }
        log_det_mass(&self.gram_small, &counts, lambda)
    }

    /// log det(λ⁻¹(λI_t + K̃_t)) for the weighted Gram with per-row weights
    /// w_s (entries w_i K_ij w_j), again reduced to the distinct support.
    pub fn log_det_ratio_weighted(&self, weights: &[f64], lambda: f64) -> Result<f64> {
        if weights.len() != self.len() {
            return Err(Error::input("weights length must match history length"));
        }
        let mut wsum = vec![0.0; self.distinct.len()];
        for (s, &i) in self.index.iter().enumerate() {
            wsum[i] += weights[s] * weights[s];
        }
        log_det_mass(&self.gram_small, &wsum, lambda)
    }
}

/// log det(I_u + λ⁻¹ K_u diag(m)) through an LU factorization; equals
/// log det(λ⁻¹(λI_t + Ẽ K_u Ẽᵀ)) for any Ẽ with ẼᵀẼ = diag(m) by the
/// Sylvester determinant identity.
pub(crate) fn log_det_mass(gram_small: &DMatrix<f64>, m: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::input("lambda must be positive"));
    }
    let u = gram_small.nrows();
    if u == 0 {
        return Ok(0.0);
    }
    let mut a = DMatrix::identity(u, u);
    for i in 0..u {
        for j in 0..u {
            a[(i, j)] += gram_small[(i, j)] * m[j] / lambda;
        }
    }
    let lu = a.lu();
    let det: f64 = lu.determinant();
    if !(det > 0.0) {
        return Err(Error::numerical("nonpositive determinant in log-det"));
    }
    Ok(det.ln())
}

/// Internal Newton problem over a row set whose distinct support has Gram
/// `gram_small`. Rows with a reward contribute data terms; rows without one
/// are pure atoms (used for the optimistic program's candidate point) whose
/// residual is λβ − tilt.
pub(crate) struct DualProblem<'a> {
    pub gram_small: &'a DMatrix<f64>,
    pub index: &'a [usize],
    pub rewards: &'a [Option<f64>],
    pub tilt: &'a [f64],
    pub model: &'a EfModel,
    pub lambda: f64,
}

#[derive(Debug)]
pub(crate) struct NewtonOutcome {
    pub coeffs: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

impl<'a> DualProblem<'a> {
    fn rows(&self) -> usize {
        self.index.len()
    }

    fn aggregate(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.gram_small.nrows());
        for (s, &i) in self.index.iter().enumerate() {
            z[i] += x[s];
        }
        z
    }

    /// Fitted scores v = Kβ via the compression.
    pub fn values(&self, beta: &DVector<f64>) -> DVector<f64> {
        let z = self.aggregate(beta);
        let vu = self.gram_small * z;
        DVector::from_iterator(self.rows(), self.index.iter().map(|&i| vu[i]))
    }

    pub fn norm_sq(&self, beta: &DVector<f64>) -> f64 {
        let z = self.aggregate(beta);
        (self.gram_small * &z).dot(&z)
    }

    /// The untilted loss Σ (−y v + m(v))/𝔤 + (λ/2)βᵀKβ over data rows.
    pub fn loss(&self, beta: &DVector<f64>) -> f64 {
        let v = self.values(beta);
        let mut s = 0.0;
        for (r, (&vs, y)) in v.iter().zip(self.rewards).enumerate() {
            let _ = r;
            if let Some(y) = y {
                s += (-y * vs + self.model.log_partition(vs)) / self.model.g_tau();
            }
        }
        s + 0.5 * self.lambda * self.norm_sq(beta)
    }

    /// Residual ρ with ∇(loss − Σ tilt·(Kβ)) = K·ρ.
    fn residual(&self, beta: &DVector<f64>, values: &DVector<f64>) -> DVector<f64> {
        let mut rho = DVector::zeros(self.rows());
        for s in 0..self.rows() {
            let data = match self.rewards[s] {
                Some(y) => (self.model.mu(values[s]) - y) / self.model.g_tau(),
                None => 0.0,
            };
            rho[s] = data + self.lambda * beta[s] - self.tilt[s];
        }
        rho
    }

    /// Solve (D·K/𝔤 + λI)Δ = ρ with D = diag(d) via the Woodbury identity on
    /// K = E K_u Eᵀ.
    fn solve_reduced(&self, d: &[f64], rho: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.gram_small.nrows();
        let g = self.model.g_tau();
        // m_j = Σ_{s∈j} d_s
        let mut m = vec![0.0; u];
        for (s, &i) in self.index.iter().enumerate() {
            m[i] += d[s];
        }
        // W = I_u + λ⁻¹ diag(m) K_u / 𝔤
        let mut w = DMatrix::identity(u, u);
        for i in 0..u {
            for j in 0..u {
                w[(i, j)] += m[i] * self.gram_small[(i, j)] / (g * self.lambda);
            }
        }
        let a = self.aggregate(rho);
        let b = w
            .lu()
            .solve(&a)
            .ok_or_else(|| Error::numerical("singular reduced newton system"))?;
        let c = self.gram_small * b;
        let mut delta = DVector::zeros(self.rows());
        for s in 0..self.rows() {
            delta[s] = (rho[s] - d[s] * c[self.index[s]] / (g * self.lambda)) / self.lambda;
        }
        Ok(delta)
    }

    /// Damped Newton on the residual system: Armijo backtracking (c = 1e-4,
    /// halving) on the merit ½‖ρ‖², residual tolerance `tol`, at most
    /// `max_iter` iterations.
    pub fn newton(&self, beta0: DVector<f64>, tol: f64, max_iter: usize) -> Result<NewtonOutcome> {
        let mut beta = beta0;
        let mut values = self.values(&beta);
        let mut rho = self.residual(&beta, &values);
        let mut merit = 0.5 * rho.norm_squared();
        for iter in 0..max_iter {
            let rnorm = rho.norm();
            if rnorm <= tol {
                return Ok(NewtonOutcome {
                    coeffs: beta,
                    iterations: iter,
                    residual_norm: rnorm,
                });
            }
            let d: Vec<f64> = (0..self.rows())
                .map(|s| match self.rewards[s] {
                    Some(_) => self.model.mu_dot(values[s]),
                    None => 0.0,
                })
                .collect();
            let delta = self.solve_reduced(&d, &rho)?;
            let mut step = 1.0;
            loop {
                let trial = &beta - step * &delta;
                let tv = self.values(&trial);
                let tr = self.residual(&trial, &tv);
                let tm = 0.5 * tr.norm_squared();
                if tm <= merit - ARMIJO_C * step * rho.norm_squared() {
                    beta = trial;
                    values = tv;
                    rho = tr;
                    merit = tm;
                    break;
                }
                step *= 0.5;
                if step < 1e-18 {
                    return Err(Error::numerical(
                        "newton line search failed to make progress",
                    ));
                }
            }
        }
        let rnorm = rho.norm();
        if rnorm <= tol {
            return Ok(NewtonOutcome {
                coeffs: beta,
                iterations: max_iter,
                residual_norm: rnorm,
            });
        }
        Err(Error::NonConvergence {
            iterations: max_iter,
            residual: rnorm,
            last_iterate: beta.iter().cloned().collect(),
        })
    }
}

fn rewards_some(h: &History) -> Vec<Option<f64>> {
    h.rewards().iter().map(|&y| Some(y)).collect()
}

/// Ridge-regularized negative log-likelihood L(α); empty history gives 0.
pub fn loss(history: &History, model: &EfModel, lambda: f64, alpha: &[f64]) -> Result<f64> {
    check_lambda_alpha(history, lambda, alpha)?;
    if history.is_empty() {
        return Ok(0.0);
    }
    let rewards = rewards_some(history);
    let tilt = vec![0.0; history.len()];
    let p = DualProblem {
        gram_small: history.gram_small(),
        index: history.index(),
        rewards: &rewards,
        tilt: &tilt,
        model,
        lambda,
    };
    Ok(p.loss(&DVector::from_column_slice(alpha)))
}

/// Gradient ∇L(α) = K·r with r = (μ(Kα) − y)/𝔤 + λα.
pub fn loss_gradient(
    history: &History,
    model: &EfModel,
    lambda: f64,
    alpha: &[f64],
) -> Result<DVector<f64>> {
    check_lambda_alpha(history, lambda, alpha)?;
    let r = residual(history, model, lambda, alpha)?;
    let rewards = rewards_some(history);
    let tilt = vec![0.0; history.len()];
    let p = DualProblem {
        gram_small: history.gram_small(),
        index: history.index(),
        rewards: &rewards,
        tilt: &tilt,
        model,
        lambda,
    };
    Ok(p.values(&r))
}

/// Hessian ∇²L(α) = K·D·K/𝔤 + λK (dense; intended for tests and diagnostics).
pub fn loss_hessian(
    history: &History,
    model: &EfModel,
    lambda: f64,
    alpha: &[f64],
) -> Result<DMatrix<f64>> {
    check_lambda_alpha(history, lambda, alpha)?;
    let k = history
        .gram(lambda.max(f64::MIN_POSITIVE))?
        .entries()
        .clone();
    let a = DVector::from_column_slice(alpha);
    let v = &k * &a;
    let t = history.len();
    let mut dk = DMatrix::zeros(t, t);
    for i in 0..t {
        let di = model.mu_dot(v[i]) / model.g_tau();
        for j in 0..t {
            dk[(i, j)] = di * k[(i, j)];
        }
    }
    Ok(&k * dk + lambda * k)
}

/// The optimality residual r = (μ(Kα) − y)/𝔤 + λα.
pub fn residual(
    history: &History,
    model: &EfModel,
    lambda: f64,
    alpha: &[f64],
) -> Result<DVector<f64>> {
    check_lambda_alpha(history, lambda, alpha)?;
    let rewards = rewards_some(history);
    let tilt = vec![0.0; history.len()];
    let p = DualProblem {
        gram_small: history.gram_small(),
        index: history.index(),
        rewards: &rewards,
        tilt: &tilt,
        model,
        lambda,
    };
    let beta = DVector::from_column_slice(alpha);
    let values = p.values(&beta);
    Ok(p.residual(&beta, &values))
}

fn check_lambda_alpha(history: &History, lambda: f64, alpha: &[f64]) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::input("lambda must be positive"));
    }
    if alpha.len() != history.len() {
        return Err(Error::input(format!(
            "alpha length {} does not match history length {}",
            alpha.len(),
            history.len()
        )));
    }
    Ok(())
}

/// Maximum-likelihood fit together with solver diagnostics.
#[derive(Debug, Clone)]
pub struct MleSolution {
    pub f: DualFunction,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Maximum-likelihood estimate from cold start (α = 0).
pub fn mle(history: &History, model: &EfModel, lambda: f64) -> Result<MleSolution> {
    mle_warm(history, model, lambda, None)
}

/// Maximum-likelihood estimate, optionally warm-started (e.g. from the
/// previous round's α̂ padded with a zero). Correctness does not depend on the
/// warm start: the residual criterion pins the same unique solution.
pub fn mle_warm(
    history: &History,
    model: &EfModel,
    lambda: f64,
    warm: Option<&[f64]>,
) -> Result<MleSolution> {
    if !(lambda > 0.0) {
        return Err(Error::input("lambda must be positive"));
    }
    if history.is_empty() {
        return Ok(MleSolution {
            f: DualFunction::zero(history.kernel().clone()),
            iterations: 0,
            residual_norm: 0.0,
        });
    }
    let t = history.len();
    let beta0 = match warm {
        Some(w) if w.len() == t => DVector::from_column_slice(w),
        _ => DVector::zeros(t),
    };
    let rewards = rewards_some(history);
    let tilt = vec![0.0; t];
    let p = DualProblem {
        gram_small: history.gram_small(),
        index: history.index(),
        rewards: &rewards,
        tilt: &tilt,
        model,
        lambda,
    };
    let loss0 = p.loss(&DVector::zeros(t));
    let out = p.newton(beta0, NEWTON_TOL, NEWTON_MAX_ITER)?;
    debug_assert!(p.loss(&out.coeffs) <= loss0 + 1e-9);
    Ok(MleSolution {
        f: DualFunction::new(
            history.points().to_vec(),
            out.coeffs.iter().cloned().collect(),
            history.kernel().clone(),
        )?,
        iterations: out.iterations,
        residual_norm: out.residual_norm,
    })
}
