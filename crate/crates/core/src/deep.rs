//! Deep linear networks `x -> x^T W_1 W_2 ... W_L` fine-tuned from a
//! pretrained source teacher.

use log::warn;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::datasets::GaussianDesign;
use crate::linalg::{self, LinalgError, ProjectorPair};
use crate::linear::DIVERGENCE_PATIENCE;
use crate::rng;
use crate::task::{TaskError, TaskVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeepError {
    #[error("invalid layer shapes: {0}")]
    InvalidDims(String),
    #[error("teacher has zero norm")]
    ZeroTeacher,
    #[error("frozen prefix {frozen} must be below the depth {depth}")]
    FrozenPrefixTooLarge { frozen: usize, depth: usize },
    #[error("gradient descent diverged at iteration {iteration} (loss {loss:e})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("gradient descent did not reach tolerance {tol:e} in {max_iters} iterations (loss {loss:e})")]
    NotConverged { max_iters: usize, tol: f64, loss: f64 },
    #[error("source teacher has no component in the data span")]
    DegenerateSource,
    #[error("no positive root of the norm equation")]
    NoPositiveRoot,
    #[error("epsilon must lie in (0, 1) (got {0})")]
    BadEpsilon(f64),
    #[error("sample count {n} exceeds dimension {d}")]
    TooManySamples { n: usize, d: usize },
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, DeepError>;

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DeepError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// Layer `j` (0-based) has shape `d_j x d_{j+1}` with `d_0 = d`, `d_L = 1`
/// and hidden widths at least `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepLinearNet {
    layers: Vec<DMatrix<f64>>,
}

impl DeepLinearNet {
    pub fn new(layers: Vec<DMatrix<f64>>) -> Result<Self> {
        let depth = layers.len();
        if depth == 0 {
            return Err(DeepError::InvalidDims("no layers".into()));
        }
        let d = layers[0].nrows();
        if d == 0 {
            return Err(DeepError::InvalidDims("input dimension is zero".into()));
        }
        for (j, w) in layers.iter().enumerate() {
            linalg::check_finite_matrix(w, "layer weights")?;
            if j + 1 < depth {
                if w.ncols() != layers[j + 1].nrows() {
                    return Err(DeepError::InvalidDims(format!(
                        "layer {j} has {} columns but layer {} has {} rows",
                        w.ncols(),
                        j + 1,
                        layers[j + 1].nrows()
                    )));
                }
                if w.ncols() < d {
                    return Err(DeepError::InvalidDims(format!("hidden width {} below input dimension {d}", w.ncols())));
                }
            } else if w.ncols() != 1 {
                return Err(DeepError::InvalidDims("last layer must have one column".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    /// `W_1 W_2 ... W_L` as a length-`d` vector.
    pub fn end_to_end(&self) -> DVector<f64> {
        let suffix = suffix_vectors(&self.layers);
        &self.layers[0] * &suffix[0]
    }
}

/// `suffix[j] = W_{j+1} ... W_L` as a vector of length `d_{j+1}`.
fn suffix_vectors(layers: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    let depth = layers.len();
    let mut suffix = vec![DVector::from_element(1, 1.0); depth];
    for j in (0..depth - 1).rev() {
        suffix[j] = &layers[j + 1] * &suffix[j + 1];
    }
    suffix
}

fn validate_hidden(d: usize, depth: usize, hidden_dims: &[usize]) -> Result<()> {
    if depth == 0 {
        return Err(DeepError::InvalidDims("depth must be at least 1".into()));
    }
    if hidden_dims.len() != depth - 1 {
        return Err(DeepError::InvalidDims(format!(
            "{} hidden widths for depth {depth}",
            hidden_dims.len()
        )));
    }
    if let Some(h) = hidden_dims.iter().find(|&&h| h < d) {
        return Err(DeepError::InvalidDims(format!("hidden width {h} below input dimension {d}")));
    }
    Ok(())
}

/// Hidden widths all equal to the input dimension.
pub fn default_hidden_dims(d: usize, depth: usize) -> Vec<usize> {
    vec![d; depth.saturating_sub(1)]
}

/// Rank-one, exactly balanced factorization of `theta` into `depth` layers.
pub fn balanced_init_from_teacher(theta: &TaskVector, depth: usize, hidden_dims: &[usize], seed: u64) -> Result<DeepLinearNet> {
    let d = theta.dim();
    validate_hidden(d, depth, hidden_dims)?;
    let norm = theta.norm();
    if norm == 0.0 {
        return Err(DeepError::ZeroTeacher);
    }
    if depth == 1 {
        return DeepLinearNet::new(vec![DMatrix::from_column_slice(d, 1, theta.as_vector().as_slice())]);
    }
    let s = norm.powf(1.0 / depth as f64);
    let dir = theta.as_vector() / norm;
    let mut r = rng::stream(seed, 0xBA);
    let vs: Vec<DVector<f64>> = hidden_dims.iter().map(|&h| rng::unit_vector(&mut r, h)).collect();
    let mut layers = Vec::with_capacity(depth);
    layers.push(&dir * vs[0].transpose() * s);
    for j in 1..depth - 1 {
        layers.push(&vs[j - 1] * vs[j].transpose() * s);
    }
    layers.push(DMatrix::from_column_slice(vs[depth - 2].len(), 1, (&vs[depth - 2] * s).as_slice()));
    DeepLinearNet::new(layers)
}

/// Layers with i.i.d. `N(0, kappa^2)` entries.
pub fn small_random_init(d: usize, depth: usize, hidden_dims: &[usize], kappa: f64, seed: u64) -> Result<DeepLinearNet> {
    validate_hidden(d, depth, hidden_dims)?;
    let mut dims = vec![d];
    dims.extend_from_slice(hidden_dims);
    dims.push(1);
    let mut r = rng::stream(seed, 0x51);
    let layers = (0..depth)
        .map(|j| rng::gaussian_matrix(&mut r, dims[j], dims[j + 1]) * kappa)
        .collect();
    DeepLinearNet::new(layers)
}

fn balance_gaps(layers: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    (0..layers.len().saturating_sub(1))
        .map(|j| layers[j].tr_mul(&layers[j]) - &layers[j + 1] * layers[j + 1].transpose())
        .collect()
}

/// `max_j |W_j^T W_j - W_{j+1} W_{j+1}^T|_F`; zero for a single layer.
pub fn balancedness_residual(net: &DeepLinearNet) -> f64 {
    balance_gaps(&net.layers).iter().map(|g| g.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy)]
pub struct DeepGdOptions {
    pub eta: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Number of leading layers kept fixed.
    pub frozen_prefix: usize,
    /// Trajectory sampling interval in steps (0 keeps only the endpoints).
    pub record_every: usize,
    /// Return normally when `max_iters` runs out before `tol` is met.
    pub allow_unconverged: bool,
}

impl Default for DeepGdOptions {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            tol: 1e-10,
            max_iters: 2_000_000,
            frozen_prefix: 0,
            record_every: 0,
            allow_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub train_loss: f64,
    pub beta_norm: f64,
    /// `max_j |D_j(t) - D_j(0)|_F` with `D_j = W_j^T W_j - W_{j+1} W_{j+1}^T`.
    pub balancedness_drift: f64,
}

#[derive(Debug, Clone)]
pub struct DeepFtResult {
    pub net_final: DeepLinearNet,
    pub beta: DVector<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub frozen_prefix: usize,
    pub iterations: usize,
    pub final_train_loss: f64,
    pub converged: bool,
}

impl DeepFtResult {
    pub fn max_balancedness_drift(&self) -> f64 {
        self.trajectory.iter().map(|p| p.balancedness_drift).fold(0.0, f64::max)
    }
}

fn drift(gaps0: &[DMatrix<f64>], layers: &[DMatrix<f64>]) -> f64 {
    balance_gaps(layers)
        .iter()
        .zip(gaps0)
        .map(|(g, g0)| (g - g0).norm())
        .fold(0.0, f64::max)
}

/// Full-batch gradient descent on `(1/n) |x beta - y|^2` over the layers
/// not in the frozen prefix.
///
/// Unfrozen runs that miss the tolerance are an error unless
/// `allow_unconverged` is set; frozen runs return with `converged = false`.
pub fn gd_finetune_deep(net: &DeepLinearNet, x: &DMatrix<f64>, y: &DVector<f64>, opts: DeepGdOptions) -> Result<DeepFtResult> {
    let depth = net.depth();
    if opts.frozen_prefix >= depth {
        return Err(DeepError::FrozenPrefixTooLarge {
            frozen: opts.frozen_prefix,
            depth,
        });
    }
    linalg::check_finite_matrix(x, "data matrix")?;
    linalg::check_finite_vector(y, "labels")?;
    check_len("label count", x.nrows(), y.len())?;
    check_len("data columns", net.input_dim(), x.ncols())?;
    let n = x.nrows() as f64;
    let mut layers = net.layers.clone();
    let gaps0 = balance_gaps(&layers);
    let mut trajectory = Vec::new();

    let mut suffix = suffix_vectors(&layers);
    let mut beta = &layers[0] * &suffix[0];
    let mut residual = x * &beta - y;
    let mut loss = residual.norm_squared() / n;
    let mut rising = 0;
    let mut step = 0;
    let record = |step: usize, loss: f64, beta: &DVector<f64>, layers: &[DMatrix<f64>], out: &mut Vec<TrajectoryPoint>| {
        out.push(TrajectoryPoint {
            step,
            train_loss: loss,
            beta_norm: beta.norm(),
            balancedness_drift: drift(&gaps0, layers),
        });
    };
    record(0, loss, &beta, &layers, &mut trajectory);

    while loss > opts.tol && step < opts.max_iters {
        let g = x.tr_mul(&residual) * (2.0 / n);
        // left[j] = (W_1 ... W_j)^T g, a vector of length d_j.
        let mut left = Vec::with_capacity(depth);
        left.push(g);
        for j in 1..depth {
            let next = layers[j - 1].tr_mul(&left[j - 1]);
            left.push(next);
        }
        for j in opts.frozen_prefix..depth {
            layers[j].ger(-opts.eta, &left[j], &suffix[j], 1.0);
        }
        step += 1;
        suffix = suffix_vectors(&layers);
        beta = &layers[0] * &suffix[0];
        residual = x * &beta - y;
        let next = residual.norm_squared() / n;
        if !next.is_finite() {
            return Err(DeepError::Diverged { iteration: step, loss: next });
        }
        rising = if next > loss { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_PATIENCE {
            return Err(DeepError::Diverged { iteration: step, loss: next });
        }
        loss = next;
        if opts.record_every > 0 && step % opts.record_every == 0 {
            record(step, loss, &beta, &layers, &mut trajectory);
        }
    }
    if trajectory.last().map(|p| p.step) != Some(step) {
        record(step, loss, &beta, &layers, &mut trajectory);
    }
    let converged = loss <= opts.tol;
    if !converged && opts.frozen_prefix == 0 && !opts.allow_unconverged {
        return Err(DeepError::NotConverged {
            max_iters: opts.max_iters,
            tol: opts.tol,
            loss,
        });
    }
    Ok(DeepFtResult {
        net_final: DeepLinearNet { layers },
        beta,
        trajectory,
        frozen_prefix: opts.frozen_prefix,
        iterations: step,
        final_train_loss: loss,
        converged,
    })
}

/// Step size `scale / lambda` where `lambda` bounds the curvature of the
/// end-to-end dynamics for predictors of norm up to `norm_bound`.
pub fn suggested_deep_eta(x: &DMatrix<f64>, depth: usize, norm_bound: f64, scale: f64) -> Result<f64> {
    let h = crate::linear::hessian_max_eigenvalue(x).map_err(|e| match e {
        crate::linear::LinearError::Linalg(l) => DeepError::Linalg(l),
        other => DeepError::InvalidDims(other.to_string()),
    })?;
    let l = depth as f64;
    let curvature = l * norm_bound.powf(2.0 * (l - 1.0) / l) * h;
    Ok(scale / curvature)
}

/// Norm `r` of the deep limit: the positive root of
/// `r^2 - (r/s)^{2(L-1)/L} a^2 - b^2` with `a = |P_perp theta_s|`,
/// `b = |P_par theta_t|`, `s = |theta_s|`.
pub fn fixed_point_radius(proj: &ProjectorPair, theta_s: &TaskVector, theta_t: &TaskVector, depth: usize, tol: f64) -> Result<f64> {
    if depth == 0 {
        return Err(DeepError::InvalidDims("depth must be at least 1".into()));
    }
    theta_s.check_same_dim(theta_t)?;
    check_len("teacher dimension", proj.dim(), theta_s.dim())?;
    let s = theta_s.norm();
    if s == 0.0 {
        return Err(DeepError::ZeroTeacher);
    }
    let a = proj.perp(theta_s.as_vector()).norm();
    let b = proj.parallel(theta_t.as_vector()).norm();
    let l = depth as f64;
    let p = 2.0 * (l - 1.0) / l;
    if b == 0.0 {
        warn!("target teacher has no component in the data span; using the continuity root");
        return Ok(a.powf(l) / s.powf(l - 1.0));
    }
    let f = |r: f64| r * r - (r / s).powf(p) * a * a - b * b;
    let mut hi = s + theta_t.norm() + 1.0;
    let mut tries = 0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 200 || !hi.is_finite() {
            return Err(DeepError::NoPositiveRoot);
        }
    }
    linalg::find_positive_root(f, 0.0, hi, tol).map_err(|_| DeepError::NoPositiveRoot)
}

/// Limit of gradient flow from an exactly balanced pretrained net of the
/// given depth.
pub fn fixed_point_predictor(
    proj: &ProjectorPair,
    theta_s: &TaskVector,
    theta_t: &TaskVector,
    depth: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let r = fixed_point_radius(proj, theta_s, theta_t, depth, tol)?;
    let l = depth as f64;
    let scale = (r / theta_s.norm()).powf((l - 1.0) / l);
    Ok(proj.perp(theta_s.as_vector()) * scale + proj.parallel(theta_t.as_vector()))
}

fn source_ratio(proj: &ProjectorPair, theta_s: &TaskVector, theta_t: &TaskVector) -> Result<f64> {
    theta_s.check_same_dim(theta_t)?;
    check_len("teacher dimension", proj.dim(), theta_s.dim())?;
    let ps = proj.parallel(theta_s.as_vector()).norm();
    if ps <= 1e-14 * theta_s.norm() || ps == 0.0 {
        return Err(DeepError::DegenerateSource);
    }
    Ok(proj.parallel(theta_t.as_vector()).norm() / ps)
}

/// Infinite-depth limit: the source's off-span component rescaled by
/// `|P_par theta_t| / |P_par theta_s|`, plus the target's on-span component.
pub fn infinite_depth_predictor(proj: &ProjectorPair, theta_s: &TaskVector, theta_t: &TaskVector) -> Result<DVector<f64>> {
    let ratio = source_ratio(proj, theta_s, theta_t)?;
    Ok(proj.perp(theta_s.as_vector()) * ratio + proj.parallel(theta_t.as_vector()))
}

/// Population risk of the infinite-depth predictor,
/// `|Sigma^{1/2} P_perp (theta_t - ratio * theta_s)|^2`.
pub fn deep_population_risk(
    theta_s: &TaskVector,
    theta_t: &TaskVector,
    design: &GaussianDesign,
    proj: &ProjectorPair,
) -> Result<f64> {
    let ratio = source_ratio(proj, theta_s, theta_t)?;
    let v = proj.perp(&(theta_t.as_vector() - theta_s.as_vector() * ratio));
    Ok(design.eigen().quadratic_form(&v).max(0.0))
}

/// One-layer risk on a task `theta_t = alpha * theta_s`:
/// `((alpha - 1) / alpha)^2 |Sigma^{1/2} P_perp theta_t|^2`.
pub fn scaled_task_linear_risk(alpha: f64, theta_t: &TaskVector, design: &GaussianDesign, proj: &ProjectorPair) -> f64 {
    let factor = (alpha - 1.0) / alpha;
    factor * factor * design.eigen().quadratic_form(&proj.perp(theta_t.as_vector()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianRiskBounds {
    pub deep_bound: f64,
    pub shallow_bound: f64,
    pub zeta: f64,
}

/// Risk bounds for isotropic Gaussian inputs holding with deviation
/// parameter `eps`.
pub fn gaussian_risk_bounds(theta_s: &TaskVector, theta_t: &TaskVector, d: usize, n: usize, eps: f64) -> Result<GaussianRiskBounds> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(DeepError::BadEpsilon(eps));
    }
    if n > d {
        return Err(DeepError::TooManySamples { n, d });
    }
    theta_s.check_same_dim(theta_t)?;
    let (ns, nt) = (theta_s.norm(), theta_t.norm());
    if ns == 0.0 || nt == 0.0 {
        return Err(DeepError::ZeroTeacher);
    }
    let frac = (d - n) as f64 / d as f64;
    let grow = (1.0 + eps) * (1.0 + eps);
    let zeta = 2.0 * eps * (1.0 + eps) / (1.0 - eps) * nt;
    let dir_gap = (theta_t.as_vector() / nt - theta_s.as_vector() / ns).norm_squared();
    let deep_bound = frac * grow * nt * nt * dir_gap + frac * zeta * zeta;
    let shallow_bound = frac * grow * (theta_t.as_vector() - theta_s.as_vector()).norm_squared();
    Ok(GaussianRiskBounds {
        deep_bound,
        shallow_bound,
        zeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn tv(v: &[f64]) -> TaskVector {
        TaskVector::from_slice(v).unwrap()
    }

    #[test]
    fn depth_one_is_the_teacher() {
        let t = tv(&[1.0, -2.0, 3.0]);
        let net = balanced_init_from_teacher(&t, 1, &[], 0).unwrap();
        assert_eq!(net.end_to_end(), *t.as_vector());
        assert_eq!(balancedness_residual(&net), 0.0);
    }

    #[test]
    fn two_layer_example() {
        let t = tv(&[2.0, 0.0, 0.0]);
        let net = balanced_init_from_teacher(&t, 2, &[3], 4).unwrap();
        let s = 2.0_f64.sqrt();
        assert_relative_eq!(net.end_to_end(), dvector![2.0, 0.0, 0.0], epsilon = 1e-12);
        let w1 = &net.layers()[0];
        let w2 = &net.layers()[1];
        let v1 = w2.column(0) / s;
        let expected = &v1 * v1.transpose() * 2.0;
        assert_relative_eq!(w1.tr_mul(w1), expected.clone(), epsilon = 1e-12);
        assert_relative_eq!(w2 * w2.transpose(), expected, epsilon = 1e-12);
    }

    #[test]
    fn doubled_first_layer_residual() {
        // W1^T W1 becomes 4 s^2 v v^T against s^2 v v^T, so the gap is 3 s^2 v v^T.
        let t = tv(&[2.0, 0.0, 0.0]);
        let net = balanced_init_from_teacher(&t, 2, &[3], 4).unwrap();
        let mut layers = net.layers().to_vec();
        layers[0] *= 2.0;
        let doubled = DeepLinearNet::new(layers).unwrap();
        let s2 = 2.0;
        assert_relative_eq!(balancedness_residual(&doubled), 3.0 * s2, epsilon = 1e-12);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(balanced_init_from_teacher(&tv(&[1.0, 1.0]), 3, &[2], 0).is_err());
        assert!(balanced_init_from_teacher(&tv(&[1.0, 1.0]), 2, &[1], 0).is_err());
        assert!(matches!(balanced_init_from_teacher(&tv(&[0.0, 0.0]), 2, &[2], 0), Err(DeepError::ZeroTeacher)));
        let bad = DeepLinearNet::new(vec![DMatrix::zeros(2, 3), DMatrix::zeros(2, 1)]);
        assert!(bad.is_err());
    }

    #[test]
    fn gaussian_bounds_edge_cases() {
        let s = tv(&[1.0, 0.0, 0.0, 0.0]);
        let t = tv(&[3.0, 0.0, 0.0, 0.0]);
        let b = gaussian_risk_bounds(&s, &t, 4, 4, 0.1).unwrap();
        assert_eq!((b.deep_bound, b.shallow_bound), (0.0, 0.0));
        let b = gaussian_risk_bounds(&s, &t, 4, 1, 1e-9).unwrap();
        assert!(b.deep_bound < 1e-15);
        assert_relative_eq!(b.shallow_bound, 0.75 * 4.0, max_relative = 1e-8);
        assert!(matches!(gaussian_risk_bounds(&s, &t, 4, 1, 1.0), Err(DeepError::BadEpsilon(_))));
    }

    #[test]
    fn infinite_depth_degenerate_source() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let proj = linalg::projectors_from_rows(&x).unwrap();
        let s = tv(&[0.0, 1.0, 0.0]);
        let t = tv(&[1.0, 1.0, 0.0]);
        assert!(matches!(infinite_depth_predictor(&proj, &s, &t), Err(DeepError::DegenerateSource)));
    }

    #[test]
    fn continuity_root_when_target_vanishes_on_span() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let proj = linalg::projectors_from_rows(&x).unwrap();
        let s = tv(&[1.0, 1.0, 0.0]);
        let t = tv(&[0.0, 5.0, 1.0]);
        let r = fixed_point_radius(&proj, &s, &t, 3, 1e-12).unwrap();
        let (a, sn) = (1.0_f64, 2.0_f64.sqrt());
        assert_relative_eq!(r, a.powi(3) / sn.powi(2), epsilon = 1e-15);
    }
}
