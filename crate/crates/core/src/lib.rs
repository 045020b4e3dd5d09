//! Bandit optimization of exponential-family rewards whose mean is a nonlinear
//! link applied to an unknown RKHS function.
//!
//! The crate is organized around the pieces needed to run and verify
//! upper-confidence-bound policies in this setting:
//!
//! - [`kernels`]: kernel evaluation, Gram matrices, weighted Gram matrices,
//!   log-determinants and information gains, plus the primal/dual determinant
//!   identity used to move every operator computation into kernel space.
//! - [`ef_models`]: canonical exponential-family reward models (Gaussian,
//!   Bernoulli) with inverse link derivatives, model constants and samplers.
//! - [`estimation`]: ridge-regularized maximum-likelihood estimation in dual
//!   (representer) coordinates via damped Newton.
//! - [`environment`]: synthetic problem instances with a known ground-truth
//!   function, reward sampling and regret accounting.
//! - [`confidence`]: confidence radii for the ML estimate and the loss-gap
//!   radius driving optimistic decision selection.
//! - [`concentration`]: data-driven Freedman and Bernstein-like self-normalized
//!   bounds as executable functions, exact dual evaluation of self-normalized
//!   norms, and Monte-Carlo coverage experiments.
//! - [`policy`]: the efficient optimistic policy (per-candidate constrained
//!   convex program) and baselines.
//! - [`experiment`]: seeded, configurable experiment runner and verification
//!   driver; emits CSV/JSON artifacts.

// Validations use `!(x > 0.0)` on purpose: the negation also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concentration;
pub mod confidence;
pub mod ef_models;
pub mod environment;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod kernels;
pub mod policy;
pub mod seeding;

pub use error::{Error, Result};
