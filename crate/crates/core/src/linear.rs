//! One-layer linear regression fine-tuned from a source teacher.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::datasets::GaussianDesign;
use crate::linalg::{self, EigenDecomp, LinalgError, ProjectorPair};
use crate::task::{TaskError, TaskVector};

/// Consecutive loss increases after which gradient descent is declared divergent.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearError {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gradient descent diverged at iteration {iteration} (loss {loss:e})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("gradient descent did not reach tolerance {tol:e} in {max_iters} iterations (loss {loss:e})")]
    NotConverged { max_iters: usize, tol: f64, loss: f64 },
    #[error("step size {eta:e} is not below the stability limit {limit:e}")]
    StepTooLarge { eta: f64, limit: f64 },
    #[error("eigenvalue index k = {k} has non-positive eigenvalue {value:e}")]
    NonPositiveEigenvalue { k: usize, value: f64 },
    #[error("k = {k} outside 1..={dim}")]
    BadIndex { k: usize, dim: usize },
    #[error("sample count n = {n} must be below the dimension d = {d}")]
    NoNullSpace { n: usize, d: usize },
    #[error("delta must be >= 1 (got {0})")]
    BadDelta(f64),
    #[error("constant c must be positive (got {0})")]
    BadConstant(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, LinearError>;

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LinearError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// Gradient-descent settings. `eta = None` picks `0.9 * 2 / lambda_max`
/// of the loss Hessian for the given data.
#[derive(Debug, Clone, Copy)]
pub struct GdOptions {
    pub eta: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for GdOptions {
    fn default() -> Self {
        Self {
            eta: None,
            tol: 1e-10,
            max_iters: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearFtResult {
    pub gamma: DVector<f64>,
    pub iterations: usize,
    pub final_train_loss: f64,
}

/// Mean squared training error `(1/n) |x w - y|^2`.
pub fn train_mse(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (x * w - y).norm_squared() / x.nrows() as f64
}

/// Largest eigenvalue of the Hessian `(2/n) x^T x` of the training loss.
pub fn hessian_max_eigenvalue(x: &DMatrix<f64>) -> Result<f64> {
    let n = x.nrows() as f64;
    let small = if x.nrows() <= x.ncols() { x * x.transpose() } else { x.tr_mul(x) };
    let top = linalg::sym_eigenvalues(&small)?[0];
    Ok(2.0 * top / n)
}

/// Full-batch gradient descent on `(1/n) |x w - y|^2` starting from `theta_init`.
pub fn gd_finetune_linear(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    theta_init: &TaskVector,
    opts: GdOptions,
) -> Result<LinearFtResult> {
    linalg::check_finite_matrix(x, "data matrix")?;
    linalg::check_finite_vector(y, "labels")?;
    check_len("label count", x.nrows(), y.len())?;
    check_len("teacher dimension", x.ncols(), theta_init.dim())?;
    let n = x.nrows() as f64;
    let limit = 2.0 / hessian_max_eigenvalue(x)?;
    let eta = match opts.eta {
        Some(eta) if eta >= limit => return Err(LinearError::StepTooLarge { eta, limit }),
        Some(eta) => eta,
        None => 0.9 * limit,
    };
    let mut w = theta_init.as_vector().clone();
    let mut residual = x * &w - y;
    let mut loss = residual.norm_squared() / n;
    let mut rising = 0;
    for iteration in 0..opts.max_iters {
        if loss <= opts.tol {
            return Ok(LinearFtResult {
                gamma: w,
                iterations: iteration,
                final_train_loss: loss,
            });
        }
        let grad = x.tr_mul(&residual) * (2.0 / n);
        w.axpy(-eta, &grad, 1.0);
        residual = x * &w - y;
        let next = residual.norm_squared() / n;
        if !next.is_finite() {
            return Err(LinearError::Diverged { iteration, loss: next });
        }
        rising = if next > loss { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_PATIENCE {
            return Err(LinearError::Diverged { iteration, loss: next });
        }
        loss = next;
    }
    if loss <= opts.tol {
        return Ok(LinearFtResult {
            gamma: w,
            iterations: opts.max_iters,
            final_train_loss: loss,
        });
    }
    Err(LinearError::NotConverged {
        max_iters: opts.max_iters,
        tol: opts.tol,
        loss,
    })
}

/// Limit of fine-tuning: the source teacher off the data span, the target
/// teacher on it.
pub fn closed_form_linear(proj: &ProjectorPair, theta_s: &TaskVector, theta_t: &TaskVector) -> Result<DVector<f64>> {
    theta_s.check_same_dim(theta_t)?;
    check_len("teacher dimension", proj.dim(), theta_s.dim())?;
    Ok(proj.perp(theta_s.as_vector()) + proj.parallel(theta_t.as_vector()))
}

/// `(w - theta_t)^T Sigma (w - theta_t)`.
pub fn population_risk_linear(w: &DVector<f64>, theta_t: &TaskVector, design: &GaussianDesign) -> Result<f64> {
    check_len("predictor dimension", design.dim(), w.len())?;
    check_len("teacher dimension", design.dim(), theta_t.dim())?;
    Ok(design.eigen().quadratic_form(&(w - theta_t.as_vector())).max(0.0))
}

/// `|Sigma^{1/2} P_perp (theta_t - theta_s)|^2`, the risk of the closed form.
pub fn closed_form_risk(
    proj: &ProjectorPair,
    theta_s: &TaskVector,
    theta_t: &TaskVector,
    design: &GaussianDesign,
) -> Result<f64> {
    theta_s.check_same_dim(theta_t)?;
    let diff = proj.perp(&(theta_t.as_vector() - theta_s.as_vector()));
    Ok(design.eigen().quadratic_form(&diff).max(0.0))
}

fn check_k_positive(e: &EigenDecomp, k: usize) -> Result<f64> {
    let d = e.dim();
    if k == 0 || k > d {
        return Err(LinearError::BadIndex { k, dim: d });
    }
    let value = e.values()[k - 1];
    if value <= 0.0 {
        return Err(LinearError::NonPositiveEigenvalue { k, value });
    }
    Ok(value)
}

/// Spectral norm of the part of the top-`k` eigenspace of `Sigma` that the
/// sample rows miss, `|P_perp V_k|`.
pub fn davis_kahan_gap(e: &EigenDecomp, x: &DMatrix<f64>, k: usize) -> Result<f64> {
    check_k_positive(e, k)?;
    let (n, d) = x.shape();
    check_len("data columns", e.dim(), d)?;
    if n >= d {
        return Err(LinearError::NoNullSpace { n, d });
    }
    let proj = linalg::projectors_from_rows(x)?;
    let vk = e.top_vectors(k);
    let perp = proj.perp_apply_matrix(&vk);
    let gram = perp.tr_mul(&perp);
    let top = linalg::sym_eigenvalues(&gram)?[0];
    Ok(top.max(0.0).sqrt())
}

/// Bound components. Each producing operation fills its own fields and
/// leaves the others at zero; see [`BoundReport::merged`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundReport {
    pub empirical_bound: f64,
    pub concentration_bound: f64,
    pub k_used: usize,
    /// Measured spectral norm of `Sigma - x^T x / n`.
    pub sigma_gap: f64,
    pub g_value: f64,
}

impl BoundReport {
    /// Takes the empirical fields from `self` and the concentration fields
    /// from `other`.
    pub fn merged(self, other: BoundReport) -> BoundReport {
        BoundReport {
            concentration_bound: other.concentration_bound,
            g_value: other.g_value,
            ..self
        }
    }
}

fn two_term_bound(gap: f64, lambda_k: f64, top_energy: f64, bottom_energy: f64) -> f64 {
    2.0 * gap.powi(3) / (lambda_k * lambda_k) * top_energy + 2.0 * gap * bottom_energy
}

/// Deterministic risk bound of the closed-form predictor in terms of the
/// measured covariance gap `|Sigma - x^T x / n|`.
pub fn risk_upper_bound_empirical(
    e: &EigenDecomp,
    x: &DMatrix<f64>,
    theta_s: &TaskVector,
    theta_t: &TaskVector,
    k: usize,
) -> Result<BoundReport> {
    let lambda_k = check_k_positive(e, k)?;
    theta_s.check_same_dim(theta_t)?;
    check_len("teacher dimension", e.dim(), theta_s.dim())?;
    let gap = linalg::covariance_gap_norm(e, x)?;
    let diff = theta_s.as_vector() - theta_t.as_vector();
    let (top, bottom) = linalg::split_energy(e, k, &diff)?;
    Ok(BoundReport {
        empirical_bound: two_term_bound(gap, lambda_k, top, bottom),
        k_used: k,
        sigma_gap: gap,
        ..BoundReport::default()
    })
}

/// Concentration scale `c * lambda_1 * max(sqrt(r/n), r/n, sqrt(delta/n), delta/n)`
/// with `r = trace / lambda_1`.
pub fn concentration_g(e: &EigenDecomp, n: usize, delta: f64, c: f64) -> Result<f64> {
    if !(delta >= 1.0) {
        return Err(LinearError::BadDelta(delta));
    }
    if !(c > 0.0) {
        return Err(LinearError::BadConstant(c));
    }
    let l1 = e.values()[0];
    if l1 <= 0.0 {
        return Err(LinearError::NonPositiveEigenvalue { k: 1, value: l1 });
    }
    let n = n as f64;
    let r = e.values().sum() / (n * l1);
    let dn = delta / n;
    Ok(c * l1 * r.sqrt().max(r).max(dn.sqrt()).max(dn))
}

/// High-probability version of the bound with the covariance gap replaced by
/// [`concentration_g`].
pub fn risk_upper_bound_concentration(
    e: &EigenDecomp,
    n: usize,
    delta: f64,
    c: f64,
    theta_s: &TaskVector,
    theta_t: &TaskVector,
    k: usize,
) -> Result<BoundReport> {
    let lambda_k = check_k_positive(e, k)?;
    theta_s.check_same_dim(theta_t)?;
    check_len("teacher dimension", e.dim(), theta_s.dim())?;
    let g = concentration_g(e, n, delta, c)?;
    let diff = theta_t.as_vector() - theta_s.as_vector();
    let (top, bottom) = linalg::split_energy(e, k, &diff)?;
    Ok(BoundReport {
        concentration_bound: two_term_bound(g, lambda_k, top, bottom),
        k_used: k,
        g_value: g,
        ..BoundReport::default()
    })
}

/// Default ratio for [`select_k_heuristic`].
pub const DEFAULT_GAP_RATIO: f64 = 0.5;

/// Position of the largest relative spectral gap among those where
/// `lambda_{k+1} < rho * lambda_k`; `d` when there is none.
pub fn select_k_heuristic(e: &EigenDecomp, rho: f64) -> usize {
    let vals = e.values();
    let d = vals.len();
    let mut best: Option<(usize, f64)> = None;
    for k in 1..d {
        let (hi, lo) = (vals[k - 1], vals[k]);
        if hi <= 0.0 {
            break;
        }
        let ratio = lo / hi;
        if ratio < rho && best.is_none_or(|(_, r)| ratio < r) {
            best = Some((k, ratio));
        }
    }
    best.map_or(d, |(k, _)| k)
}
