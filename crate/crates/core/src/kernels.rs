//! Kernels, Gram matrices and information gains.
//!
//! Everything downstream (estimation, confidence radii, concentration bounds)
//! operates in the dual: covariance operators over a possibly
//! infinite-dimensional feature map are never formed. The bridge is the
//! determinant identity
//!
//! ```text
//! det(λ⁻¹(λI_d + ΦᵀΦ)) = det(λ⁻¹(λI_t + ΦΦᵀ))
//! ```
//!
//! so log-determinants of regularized covariance operators are computed from
//! the (possibly weighted) Gram matrix. [`verify_determinant_identity`] checks
//! the identity numerically on kernels with explicit finite features.
//!
//! All logarithms are natural.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Half-integer Matérn smoothness values with closed-form kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternSmoothness {
    /// ν = 1/2 (exponential kernel).
    Half,
    /// ν = 3/2.
    ThreeHalves,
    /// ν = 5/2.
    FiveHalves,
}

/// Feature map for kernels defined through explicit finite-dimensional
/// features, k(x, x') = ⟨φ(x), φ(x')⟩.
pub type FeatureMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum KernelKind {
    /// k(x, x') = ⟨x, x'⟩
    Linear,
    /// k(x, x') = exp(−‖x−x'‖² / (2ℓ²))
    Rbf { lengthscale: f64 },
    /// Half-integer Matérn with lengthscale ℓ.
    Matern {
        smoothness: MaternSmoothness,
        lengthscale: f64,
    },
    /// k(x, x') = ⟨φ(x), φ(x')⟩ for an explicit feature map φ : ℝ^m → ℝ^d.
    ExplicitFeatures { dimension: usize, map: FeatureMap },
}

impl fmt::Debug for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Linear => write!(f, "Linear"),
            KernelKind::Rbf { lengthscale } => write!(f, "Rbf {{ lengthscale: {lengthscale} }}"),
            KernelKind::Matern {
                smoothness,
                lengthscale,
            } => write!(
                f,
                "Matern {{ smoothness: {smoothness:?}, lengthscale: {lengthscale} }}"
            ),
            KernelKind::ExplicitFeatures { dimension, .. } => {
                write!(f, "ExplicitFeatures {{ dimension: {dimension} }}")
            }
        }
    }
}

/// A kernel together with the known bound K on sup_x √k(x, x).
#[derive(Debug, Clone)]
pub struct Kernel {
    kind: KernelKind,
    bound: f64,
}

impl Kernel {
    /// RBF kernel; bounded by 1.
    pub fn rbf(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) {
            return Err(Error::input(format!(
                "rbf lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(Kernel {
            kind: KernelKind::Rbf { lengthscale },
            bound: 1.0,
        })
    }

    /// Matérn kernel with half-integer smoothness; bounded by 1.
    pub fn matern(smoothness: MaternSmoothness, lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) {
            return Err(Error::input(format!(
                "matern lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(Kernel {
            kind: KernelKind::Matern {
                smoothness,
                lengthscale,
            },
            bound: 1.0,
        })
    }

    /// Linear kernel. The bound K = sup ‖x‖ over the decision domain must be
    /// supplied by the caller (see [`Kernel::linear_for_points`]).
    pub fn linear(bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::input(format!(
                "linear kernel bound must be positive, got {bound}"
            )));
        }
        Ok(Kernel {
            kind: KernelKind::Linear,
            bound,
        })
    }

    /// Linear kernel with K computed as the maximum norm over a finite
    /// decision set.
    pub fn linear_for_points(points: &[Vec<f64>]) -> Result<Self> {
        let bound = points
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0_f64, f64::max);
        Kernel::linear(bound.max(f64::MIN_POSITIVE))
    }

    /// Kernel through an explicit feature map, with a caller-supplied bound on
    /// sup ‖φ(x)‖.
    pub fn explicit_features(dimension: usize, map: FeatureMap, bound: f64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::input("feature dimension must be positive"));
        }
        if !(bound > 0.0) {
            return Err(Error::input("kernel bound must be positive"));
        }
        Ok(Kernel {
            kind: KernelKind::ExplicitFeatures { dimension, map },
            bound,
        })
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    /// The constant K with sup_x k(x, x) ≤ K².
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Evaluate k(x, x').
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::input(format!(
                "dimension mismatch: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        let v = match &self.kind {
            KernelKind::Linear => dot(x, y),
            KernelKind::Rbf { lengthscale } => {
                let d2 = sq_dist(x, y);
                (-d2 / (2.0 * lengthscale * lengthscale)).exp()
            }
            KernelKind::Matern {
                smoothness,
                lengthscale,
            } => {
                let r = sq_dist(x, y).sqrt() / lengthscale;
                match smoothness {
                    MaternSmoothness::Half => (-r).exp(),
                    MaternSmoothness::ThreeHalves => {
                        let a = 3.0_f64.sqrt() * r;
                        (1.0 + a) * (-a).exp()
                    }
                    MaternSmoothness::FiveHalves => {
                        let a = 5.0_f64.sqrt() * r;
                        (1.0 + a + 5.0 * r * r / 3.0) * (-a).exp()
                    }
                }
            }
            KernelKind::ExplicitFeatures { dimension, map } => {
                let fx = map(x);
                let fy = map(y);
                if fx.len() != *dimension || fy.len() != *dimension {
                    return Err(Error::input("feature map returned wrong dimension"));
                }
                dot(&fx, &fy)
            }
        };
        Ok(v)
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// Lower Cholesky factor of λI + m, with the module-standard jitter policy:
/// on failure, add 1e-10·trace(λI + m) once; a second failure is a hard
/// numerical error.
pub(crate) fn chol_regularized(m: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut a = m.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let trace: f64 = (0..n).map(|i| a[(i, i)]).sum();
    if let Some(c) = nalgebra::linalg::Cholesky::new(a.clone()) {
        return Ok(c.unpack());
    }
    let jitter = 1e-10 * trace;
    for i in 0..n {
        a[(i, i)] += jitter;
    }
    nalgebra::linalg::Cholesky::new(a)
        .map(|c| c.unpack())
        .ok_or_else(|| Error::numerical("cholesky failed after jitter"))
}

fn log_det_ratio_from_chol(chol: &DMatrix<f64>, lambda: f64) -> f64 {
    let n = chol.nrows();
    let mut s = 0.0;
    for i in 0..n {
        s += 2.0 * chol[(i, i)].ln();
    }
    s - n as f64 * lambda.ln()
}

/// Gram matrix of a point sequence, with the Cholesky factor of λI + K
/// maintained alongside.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    lambda: f64,
    chol: DMatrix<f64>,
}

impl GramMatrix {
    /// Build the Gram matrix K[i][j] = k(x_i, x_j) and factor λI + K.
    pub fn new(kernel: &Kernel, points: &[Vec<f64>], lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::input(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        let n = points.len();
        let mut entries = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = kernel.eval(&points[i], &points[j])?;
                entries[(i, j)] = v;
                entries[(j, i)] = v;
            }
        }
        let chol = chol_regularized(&entries, lambda)?;
        Ok(GramMatrix {
            entries,
            lambda,
            chol,
        })
    }

    /// Wrap an existing symmetric PSD matrix.
    pub fn from_entries(entries: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::input(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        if entries.nrows() != entries.ncols() {
            return Err(Error::input("gram matrix must be square"));
        }
        let chol = chol_regularized(&entries, lambda)?;
        Ok(GramMatrix {
            entries,
            lambda,
            chol,
        })
    }

    pub fn empty(lambda: f64) -> Result<Self> {
        GramMatrix::from_entries(DMatrix::zeros(0, 0), lambda)
    }

    pub fn order(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Lower Cholesky factor of λI + K.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Grow by one point: `cross` holds k(x_new, x_i) for the existing points
    /// and `diag` = k(x_new, x_new). The factor is extended by one row; if the
    /// extension loses positivity it is rebuilt from scratch under the jitter
    /// policy.
    pub fn append(&mut self, cross: &[f64], diag: f64) -> Result<()> {
        let n = self.order();
        if cross.len() != n {
            return Err(Error::input("cross row has wrong length"));
        }
        let mut entries = DMatrix::zeros(n + 1, n + 1);
        entries.view_mut((0, 0), (n, n)).copy_from(&self.entries);
        for i in 0..n {
            entries[(n, i)] = cross[i];
            entries[(i, n)] = cross[i];
        }
        entries[(n, n)] = diag;

        // Extend L: solve L ℓ = cross, d² = (λ + diag) − ‖ℓ‖².
        let mut ell = DVector::from_column_slice(cross);
        self.chol
            .solve_lower_triangular_mut(&mut ell)
            .then_some(())
            .ok_or_else(|| Error::numerical("singular cholesky factor"))?;
        let d2 = self.lambda + diag - ell.norm_squared();
        if d2 > 0.0 {
            let mut chol = DMatrix::zeros(n + 1, n + 1);
            chol.view_mut((0, 0), (n, n)).copy_from(&self.chol);
            for i in 0..n {
                chol[(n, i)] = ell[i];
            }
            chol[(n, n)] = d2.sqrt();
            self.chol = chol;
        } else {
            self.chol = chol_regularized(&entries, self.lambda)?;
        }
        self.entries = entries;
        Ok(())
    }

    /// log det(λ⁻¹(λI + K)) at the matrix's own λ; always ≥ 0.
    pub fn log_det_ratio(&self) -> f64 {
        log_det_ratio_from_chol(&self.chol, self.lambda)
    }

    /// log det(λ⁻¹(λI + K)) at an arbitrary λ (refactors when it differs).
    pub fn log_det_ratio_at(&self, lambda: f64) -> Result<f64> {
        if lambda == self.lambda {
            return Ok(self.log_det_ratio());
        }
        if !(lambda > 0.0) {
            return Err(Error::input("lambda must be positive"));
        }
        let chol = chol_regularized(&self.entries, lambda)?;
        Ok(log_det_ratio_from_chol(&chol, lambda))
    }

    /// Information gain Γ = ½ log det(λ⁻¹(λI + K)).
    pub fn information_gain(&self) -> f64 {
        0.5 * self.log_det_ratio()
    }

    /// (λI + K)⁻¹ rhs via the cached factor.
    pub fn solve_regularized(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = rhs.clone();
        self.chol.solve_lower_triangular_mut(&mut x);
        self.chol.tr_solve_lower_triangular_mut(&mut x);
        x
    }
}

/// Gram matrix of the weighted kernel σ(x)·k(x,x')·σ(x'):
/// entries = diag(w)·K·diag(w).
#[derive(Debug, Clone)]
pub struct WeightedGramMatrix {
    weights: Vec<f64>,
    entries: DMatrix<f64>,
    lambda: f64,
    chol: DMatrix<f64>,
}

impl WeightedGramMatrix {
    pub fn new(base: &GramMatrix, weights: &[f64]) -> Result<Self> {
        if weights.len() != base.order() {
            return Err(Error::input(format!(
                "weights length {} does not match gram order {}",
                weights.len(),
                base.order()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::input(format!(
                "weights must be nonnegative, got {w}"
            )));
        }
        let n = base.order();
        let mut entries = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                entries[(i, j)] = weights[i] * base.entries()[(i, j)] * weights[j];
            }
        }
        let chol = chol_regularized(&entries, base.lambda())?;
        Ok(WeightedGramMatrix {
            weights: weights.to_vec(),
            entries,
            lambda: base.lambda(),
            chol,
        })
    }

    pub fn order(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det_ratio(&self) -> f64 {
        log_det_ratio_from_chol(&self.chol, self.lambda)
    }

    pub fn log_det_ratio_at(&self, lambda: f64) -> Result<f64> {
        if lambda == self.lambda {
            return Ok(self.log_det_ratio());
        }
        if !(lambda > 0.0) {
            return Err(Error::input("lambda must be positive"));
        }
        let chol = chol_regularized(&self.entries, lambda)?;
        Ok(log_det_ratio_from_chol(&chol, lambda))
    }

    /// Weighted information gain Γ̃ = ½ log det(λ⁻¹(λI + K̃)).
    pub fn information_gain(&self) -> f64 {
        0.5 * self.log_det_ratio()
    }

    /// (λI + K̃)⁻¹ rhs via the cached factor.
    pub fn solve_regularized(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = rhs.clone();
        self.chol.solve_lower_triangular_mut(&mut x);
        self.chol.tr_solve_lower_triangular_mut(&mut x);
        x
    }
}

/// Check det(λ⁻¹V_t(λ)) = det(λ⁻¹K_t(λ)) on an explicit-feature kernel:
/// computes log det(λ⁻¹(λI_d + ΦᵀΦ)) and log det(λ⁻¹(λI_t + ΦΦᵀ))
/// independently and returns the absolute discrepancy.
pub fn verify_determinant_identity(
    kernel: &Kernel,
    points: &[Vec<f64>],
    lambda: f64,
) -> Result<f64> {
    let KernelKind::ExplicitFeatures { dimension, map } = kernel.kind() else {
        return Err(Error::unsupported(
            "determinant identity requires an explicit-feature kernel",
        ));
    };
    if !(lambda > 0.0) {
        return Err(Error::input("lambda must be positive"));
    }
    let t = points.len();
    let d = *dimension;
    let mut phi = DMatrix::zeros(t, d);
    for (i, p) in points.iter().enumerate() {
        let f = map(p);
        if f.len() != d {
            return Err(Error::input("feature map returned wrong dimension"));
        }
        for j in 0..d {
            phi[(i, j)] = f[j];
        }
    }
    let primal = phi.transpose() * &phi; // d×d
    let dual = &phi * phi.transpose(); // t×t
    let lp = log_det_ratio_from_chol(&chol_regularized(&primal, lambda)?, lambda);
    let ld = log_det_ratio_from_chol(&chol_regularized(&dual, lambda)?, lambda);
    Ok((lp - ld).abs())
}
