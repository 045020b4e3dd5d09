//! Synthetic problem instances: ground-truth function, reward sampling and
//! regret accounting.
//!
//! The ground truth f* = Σ_i c_i k(·, z_i) is built on random anchor points
//! that are distinct from the decision set, so f* is generic in the RKHS
//! rather than supported on the arms. The coefficients are rescaled so
//! ‖f*‖ = B exactly.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::ef_models::EfModel;
use crate::error::{Error, Result};
use crate::estimation::DualFunction;
use crate::kernels::{GramMatrix, Kernel};

/// A fixed bandit instance: finite decision set, ground truth, reward model.
#[derive(Debug, Clone)]
pub struct Environment {
    decision_set: Vec<Vec<f64>>,
    f_star: DualFunction,
    f_star_values: Vec<f64>,
    model: EfModel,
    x_star_index: usize,
    kappa_star: f64,
    kappa_x: f64,
    norm_bound: f64,
}

/// One logged round of a bandit run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub round: usize,
    pub arm_index: usize,
    pub reward: f64,
    pub instant_regret: f64,
    pub cumulative_regret: f64,
    pub radius_d: f64,
    pub radius_b: f64,
    pub newton_iters: usize,
    pub bisection_iters: usize,
    pub wall_ms: f64,
}

impl Environment {
    /// Generate an instance: `num_anchors` anchors and `num_arms` arms drawn
    /// uniformly from the box, coefficients rescaled so cᵀK_z c = B².
    /// Deterministic given the RNG. A degenerate anchor Gram (norm below
    /// 1e-12) triggers a retry with the advanced stream, at most 5 attempts.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        rng: &mut ChaCha12Rng,
        kernel: &Kernel,
        model: EfModel,
        num_arms: usize,
        num_anchors: usize,
        norm_bound: f64,
        dimension: usize,
        box_low: f64,
        box_high: f64,
    ) -> Result<Self> {
        if num_arms < 2 {
            return Err(Error::input("need at least 2 arms"));
        }
        if num_anchors == 0 || dimension == 0 {
            return Err(Error::input("need at least one anchor and one dimension"));
        }
        if !(norm_bound > 0.0) {
            return Err(Error::input("norm bound must be positive"));
        }
        if !(box_high > box_low) {
            return Err(Error::input("box must have positive volume"));
        }

        let sample_point = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..dimension)
                .map(|_| rng.gen_range(box_low..box_high))
                .collect()
        };

        for _attempt in 0..5 {
            let anchors: Vec<Vec<f64>> = (0..num_anchors).map(|_| sample_point(rng)).collect();
            let coeffs: Vec<f64> = (0..num_anchors).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let anchor_gram = GramMatrix::new(kernel, &anchors, 1.0)?;
            let c = DVector::from_column_slice(&coeffs);
            let norm_sq = (anchor_gram.entries() * &c).dot(&c);
            if norm_sq <= 1e-12 {
                continue; // degenerate draw; retry with the advanced stream
            }
            let scale = norm_bound / norm_sq.sqrt();
            let coeffs: Vec<f64> = coeffs.iter().map(|v| v * scale).collect();
            let f_star = DualFunction::new(anchors, coeffs, kernel.clone())?;

            let decision_set: Vec<Vec<f64>> = (0..num_arms).map(|_| sample_point(rng)).collect();
            return Environment::from_parts(decision_set, f_star, model, norm_bound);
        }
        Err(Error::numerical(
            "anchor gram degenerate in 5 consecutive attempts",
        ))
    }

    /// Assemble an environment from explicit parts (also used by tests).
    pub fn from_parts(
        decision_set: Vec<Vec<f64>>,
        f_star: DualFunction,
        model: EfModel,
        norm_bound: f64,
    ) -> Result<Self> {
        if decision_set.len() < 2 {
            return Err(Error::input("need at least 2 arms"));
        }
        let mut values = Vec::with_capacity(decision_set.len());
        for x in &decision_set {
            values.push(f_star.evaluate(x)?);
        }
        let x_star_index = argmax_lowest(&values);
        let mut ordered = vec![values[x_star_index]];
        ordered.extend(values.iter().cloned());
        let (kappa_star, kappa_x) = model.kappa_constants(&ordered)?;
        Ok(Environment {
            decision_set,
            f_star,
            f_star_values: values,
            model,
            x_star_index,
            kappa_star,
            kappa_x,
            norm_bound,
        })
    }

    pub fn decision_set(&self) -> &[Vec<f64>] {
        &self.decision_set
    }

    pub fn num_arms(&self) -> usize {
        self.decision_set.len()
    }

    pub fn f_star(&self) -> &DualFunction {
        &self.f_star
    }

    /// f*(x) for every arm, in decision-set order.
    pub fn f_star_values(&self) -> &[f64] {
        &self.f_star_values
    }

    pub fn model(&self) -> &EfModel {
        &self.model
    }

    pub fn x_star_index(&self) -> usize {
        self.x_star_index
    }

    pub fn kappa_star(&self) -> f64 {
        self.kappa_star
    }

    pub fn kappa_x(&self) -> f64 {
        self.kappa_x
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    /// Sample a reward for the given arm.
    pub fn step<R: Rng + ?Sized>(&self, arm_index: usize, rng: &mut R) -> Result<f64> {
        let z = *self
            .f_star_values
            .get(arm_index)
            .ok_or_else(|| Error::input(format!("arm index {arm_index} out of range")))?;
        Ok(self.model.sample(z, rng))
    }

    /// μ(f*(x*)) − μ(f*(x)); nonnegative, zero at the optimum.
    pub fn instant_regret(&self, arm_index: usize) -> Result<f64> {
        let z = *self
            .f_star_values
            .get(arm_index)
            .ok_or_else(|| Error::input(format!("arm index {arm_index} out of range")))?;
        let best = self.model.mu(self.f_star_values[self.x_star_index]);
        Ok((best - self.model.mu(z)).max(0.0))
    }
}

/// Index of the maximum, ties resolved to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
