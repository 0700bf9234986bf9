//! Two-layer ReLU networks `f(x) = m^{-1/2} sum_r a_r relu(w_r^T x)` with a
//! fixed sign layer, trained by gradient descent on `1/2 |u - y|^2`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::linear::DIVERGENCE_PATIENCE;
use crate::rng;
use crate::task::TaskVector;

/// Tolerance on `|x_i| = 1`.
pub const UNIT_NORM_TOL: f64 = 1e-8;
/// Smallest eigenvalue below which a gram matrix counts as singular.
pub const SINGULAR_GRAM_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NtkError {
    #[error("row {row} has norm {norm}, expected 1")]
    NonUnitRow { row: usize, norm: f64 },
    #[error("gram matrix is singular (smallest eigenvalue {lambda_min:e})")]
    SingularGram { lambda_min: f64 },
    #[error("initialization scale must be positive (got {0})")]
    BadKappa(f64),
    #[error("width must be at least 1")]
    ZeroWidth,
    #[error("label {index} has magnitude {value} > 1")]
    LabelOutOfRange { index: usize, value: f64 },
    #[error("step size {eta:e} exceeds the configured maximum {eta_max:e}")]
    StepTooLarge { eta: f64, eta_max: f64 },
    #[error("training diverged at iteration {iteration} (loss {loss:e})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("pretraining reached MSE {mse:e} after {iters} iterations, above the tolerance {tol:e}")]
    PretrainingFailed { iters: usize, mse: f64, tol: f64 },
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NtkError>;

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(NtkError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

pub fn check_unit_rows(x: &DMatrix<f64>) -> Result<()> {
    linalg::check_finite_matrix(x, "inputs")?;
    for (row, r) in x.row_iter().enumerate() {
        let norm = r.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(NtkError::NonUnitRow { row, norm });
        }
    }
    Ok(())
}

fn check_labels(y: &DVector<f64>) -> Result<()> {
    linalg::check_finite_vector(y, "labels")?;
    if let Some((index, &value)) = y.iter().enumerate().find(|(_, v)| v.abs() > 1.0) {
        return Err(NtkError::LabelOutOfRange { index, value });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNtkNet {
    /// `m x d`, one neuron per row.
    pub w: DMatrix<f64>,
    /// Output signs, fixed for the life of the net.
    pub a: DVector<f64>,
    pub kappa: f64,
}

impl ReluNtkNet {
    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    /// `n x m` pre-activations `x w_r`.
    fn preactivations(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.w.transpose()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let z = self.preactivations(x);
        let scale = 1.0 / (self.width() as f64).sqrt();
        DVector::from_iterator(
            x.nrows(),
            z.row_iter().map(|row| row.iter().zip(self.a.iter()).map(|(v, a)| a * v.max(0.0)).sum::<f64>() * scale),
        )
    }
}

/// `W` with i.i.d. `N(0, kappa^2)` entries and uniform random signs `a`.
pub fn init_relu_net(m: usize, d: usize, kappa: f64, seed: u64) -> Result<ReluNtkNet> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(NtkError::BadKappa(kappa));
    }
    if m == 0 {
        return Err(NtkError::ZeroWidth);
    }
    let mut r = rng::stream(seed, 0x4E);
    let w = rng::gaussian_matrix(&mut r, m, d) * kappa;
    let a = DVector::from_iterator(m, (0..m).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }));
    Ok(ReluNtkNet { w, a, kappa })
}

/// Symmetric PSD gram matrix with its smallest eigenvalue.
#[derive(Debug, Clone)]
pub struct NtkGram {
    pub h: DMatrix<f64>,
    pub lambda_min: f64,
}

/// `E_w[ x_i^T x_j 1{w^T x_i >= 0, w^T x_j >= 0} ]` for standard Gaussian `w`
/// and unit vectors with inner product `u`.
pub fn arccos_kernel(u: f64) -> f64 {
    let c = u.clamp(-1.0, 1.0);
    c * (PI - c.acos()) / (2.0 * PI)
}

/// Infinite-width gram matrix. Rows must be unit vectors; the diagonal is
/// exactly 1/2.
pub fn ntk_gram_infinite(x: &DMatrix<f64>) -> Result<NtkGram> {
    check_unit_rows(x)?;
    let n = x.nrows();
    let dots = x * x.transpose();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = 0.5;
        for j in (i + 1)..n {
            let v = arccos_kernel(dots[(i, j)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let lambda_min = linalg::sym_eigenvalues(&h)?[n - 1];
    if lambda_min <= SINGULAR_GRAM_TOL {
        return Err(NtkError::SingularGram { lambda_min });
    }
    Ok(NtkGram { h, lambda_min })
}

fn activation_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

fn gram_from_activations(x: &DMatrix<f64>, act: &DMatrix<f64>) -> DMatrix<f64> {
    let m = act.ncols() as f64;
    let counts = act * act.transpose();
    (x * x.transpose()).component_mul(&counts) / m
}

/// Finite-width gram matrix `(1/m) x_i^T x_j #{r : both active}`.
pub fn ntk_gram_finite(net: &ReluNtkNet, x: &DMatrix<f64>) -> Result<NtkGram> {
    check_unit_rows(x)?;
    check_len("input dimension", net.input_dim(), x.ncols())?;
    let act = activation_matrix(&net.preactivations(x));
    let h = gram_from_activations(x, &act);
    let lambda_min = linalg::sym_eigenvalues(&h)?[x.nrows() - 1];
    Ok(NtkGram { h, lambda_min })
}

#[derive(Debug, Clone, Copy)]
pub struct ReluGdOptions {
    pub eta: f64,
    pub iters: usize,
    /// Recording interval for the loss curve and gram drift (0 keeps only the endpoints).
    pub record_every: usize,
    /// Optional ceiling on `eta`.
    pub eta_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NtkBounds {
    /// `2 sqrt(y~^T H^{-1} y~ / n)`.
    pub finetune_bound: f64,
    /// `sqrt(y~^T H^{-1} y~)`.
    pub quad_form_sqrt: f64,
    /// `sqrt(log(n / (lambda_0 delta)) / n)` with unit constant.
    pub log_term: f64,
    pub linear_teacher_bound: Option<f64>,
    pub random_init_bound: Option<f64>,
}

impl NtkBounds {
    /// Whether the linear-teacher fine-tuning bound beats training from scratch,
    /// i.e. `6 |theta_t - theta_s| < 3 sqrt(2) |theta_t|`.
    pub fn finetune_beats_random_init(&self) -> Option<bool> {
        Some(self.linear_teacher_bound? < self.random_init_bound?)
    }
}

#[derive(Debug, Clone)]
pub struct NtkFtReport {
    /// `|y - u(t)|` at recorded steps.
    pub loss_curve: Vec<CurvePoint>,
    /// Spectral prediction of `|y - u(t)|` from `H_inf` at the same steps.
    pub predicted_curve: Vec<CurvePoint>,
    /// `|H(t) - H_inf|_F` at recorded steps.
    pub gram_drift: Vec<CurvePoint>,
    /// `|H(t) - H(0)|_F` at recorded steps.
    pub gram_drift_from_start: Vec<CurvePoint>,
    /// `max_r |w_r(t) - w_r(0)|` over the run.
    pub weight_drift_max: f64,
    pub y_tilde_norm: f64,
    pub bounds: Option<NtkBounds>,
}

impl NtkFtReport {
    /// Largest gap between the measured and predicted curves.
    pub fn max_curve_deviation(&self) -> f64 {
        self.loss_curve
            .iter()
            .zip(&self.predicted_curve)
            .map(|(a, b)| (a.value - b.value).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_gram_drift(&self) -> f64 {
        self.gram_drift.iter().map(|p| p.value).fold(0.0, f64::max)
    }

    pub fn max_gram_drift_from_start(&self) -> f64 {
        self.gram_drift_from_start.iter().map(|p| p.value).fold(0.0, f64::max)
    }
}

/// `|y - u(t)|` predicted by linearized dynamics
/// `sqrt(sum_i (1 - eta lambda_i)^{2t} (v_i^T y~)^2)`.
pub struct SpectralPrediction {
    lambdas: Vec<f64>,
    coords: Vec<f64>,
    eta: f64,
}

impl SpectralPrediction {
    pub fn new(h_inf: &NtkGram, y_tilde: &DVector<f64>, eta: f64) -> Result<Self> {
        let e = linalg::eig_sym(&h_inf.h)?;
        let coords = e.vectors().tr_mul(y_tilde);
        Ok(Self {
            lambdas: e.values().iter().copied().collect(),
            coords: coords.iter().copied().collect(),
            eta,
        })
    }

    pub fn at(&self, t: usize) -> f64 {
        self.lambdas
            .iter()
            .zip(&self.coords)
            .map(|(l, c)| (1.0 - self.eta * l).powi(2 * t as i32) * c * c)
            .sum::<f64>()
            .sqrt()
    }
}

fn weight_drift(w: &DMatrix<f64>, w0: &DMatrix<f64>) -> f64 {
    (w - w0).row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// One gradient step on `1/2 |u - y|^2` given the current activations and outputs.
fn gd_step(net: &mut ReluNtkNet, x: &DMatrix<f64>, y: &DVector<f64>, eta: f64, act: &DMatrix<f64>, u: &DVector<f64>) {
    let scale = 1.0 / (net.width() as f64).sqrt();
    let r = u - y;
    // coeff[(i, k)] = a_k 1{neuron k active on x_i} (u_i - y_i) / sqrt(m)
    let mut coeff = act.clone();
    for (i, mut row) in coeff.row_iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v *= net.a[k] * r[i] * scale;
        }
    }
    // grad = coeff^T x  (m x d)
    net.w.gemm_tr(-eta, &coeff, x, 1.0);
}

fn forward(net: &ReluNtkNet, x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let z = net.preactivations(x);
    let scale = 1.0 / (net.width() as f64).sqrt();
    let u = DVector::from_iterator(
        x.nrows(),
        z.row_iter().map(|row| row.iter().zip(net.a.iter()).map(|(v, a)| a * v.max(0.0)).sum::<f64>() * scale),
    );
    (activation_matrix(&z), u)
}

/// Runs `opts.iters` full-batch gradient steps on the first layer and
/// compares the loss curve against the infinite-width spectral prediction.
pub fn gd_train_relu(
    net: &ReluNtkNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: ReluGdOptions,
) -> Result<(ReluNtkNet, NtkFtReport)> {
    check_unit_rows(x)?;
    check_labels(y)?;
    check_len("label count", x.nrows(), y.len())?;
    check_len("input dimension", net.input_dim(), x.ncols())?;
    if let Some(eta_max) = opts.eta_max {
        if opts.eta > eta_max {
            return Err(NtkError::StepTooLarge { eta: opts.eta, eta_max });
        }
    }
    let h_inf = ntk_gram_infinite(x)?;
    let mut net = net.clone();
    let w0 = net.w.clone();
    let (act0, u0) = forward(&net, x);
    let y_tilde = y - &u0;
    let prediction = SpectralPrediction::new(&h_inf, &y_tilde, opts.eta)?;
    let h0 = gram_from_activations(x, &act0);

    let mut report = NtkFtReport {
        loss_curve: Vec::new(),
        predicted_curve: Vec::new(),
        gram_drift: Vec::new(),
        gram_drift_from_start: Vec::new(),
        weight_drift_max: 0.0,
        y_tilde_norm: y_tilde.norm(),
        bounds: None,
    };
    let record = |t: usize, act: &DMatrix<f64>, u: &DVector<f64>, net: &ReluNtkNet, report: &mut NtkFtReport| {
        let h = gram_from_activations(x, act);
        report.loss_curve.push(CurvePoint { step: t, value: (y - u).norm() });
        report.predicted_curve.push(CurvePoint { step: t, value: prediction.at(t) });
        report.gram_drift.push(CurvePoint { step: t, value: (&h - &h_inf.h).norm() });
        report.gram_drift_from_start.push(CurvePoint { step: t, value: (&h - &h0).norm() });
        report.weight_drift_max = report.weight_drift_max.max(weight_drift(&net.w, &w0));
    };

    let (mut act, mut u) = (act0, u0);
    let mut loss = 0.5 * (&u - y).norm_squared();
    let mut rising = 0;
    record(0, &act, &u, &net, &mut report);
    for t in 1..=opts.iters {
        gd_step(&mut net, x, y, opts.eta, &act, &u);
        (act, u) = forward(&net, x);
        let next = 0.5 * (&u - y).norm_squared();
        if !next.is_finite() {
            return Err(NtkError::Diverged { iteration: t, loss: next });
        }
        rising = if next > loss { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_PATIENCE {
            return Err(NtkError::Diverged { iteration: t, loss: next });
        }
        loss = next;
        if t == opts.iters || (opts.record_every > 0 && t % opts.record_every == 0) {
            record(t, &act, &u, &net, &mut report);
        }
    }
    Ok((net, report))
}

/// Trains until the mean squared error `|u - y|^2 / n` drops to `tol`.
/// Returns the iteration count.
pub fn train_to_tolerance(
    net: &mut ReluNtkNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
    tol: f64,
    max_iters: usize,
) -> Result<usize> {
    check_unit_rows(x)?;
    check_labels(y)?;
    check_len("label count", x.nrows(), y.len())?;
    let n = x.nrows() as f64;
    let (mut act, mut u) = forward(net, x);
    let mut mse = (&u - y).norm_squared() / n;
    let mut rising = 0;
    let mut iters = 0;
    while mse > tol && iters < max_iters {
        gd_step(net, x, y, eta, &act, &u);
        iters += 1;
        (act, u) = forward(net, x);
        let next = (&u - y).norm_squared() / n;
        if !next.is_finite() {
            return Err(NtkError::Diverged { iteration: iters, loss: next });
        }
        rising = if next > mse { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_PATIENCE {
            return Err(NtkError::Diverged { iteration: iters, loss: next });
        }
        mse = next;
    }
    if mse > tol {
        return Err(NtkError::PretrainingFailed { iters, mse, tol });
    }
    Ok(iters)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainFinetuneOptions {
    pub m: usize,
    pub kappa: f64,
    pub eta_source: f64,
    pub eta_target: f64,
    pub seed: u64,
    pub pretrain_tol: f64,
    pub pretrain_max_iters: usize,
    pub finetune_iters: usize,
    pub record_every: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainFinetuneOutcome {
    pub report: NtkFtReport,
    pub pretrained: ReluNtkNet,
    pub finetuned: ReluNtkNet,
    pub pretrain_iters: usize,
    /// `y - f(x, pretrained)` on the target inputs.
    pub y_tilde: DVector<f64>,
}

/// Pretrains on the source sample to `pretrain_tol`, then fine-tunes on the
/// target sample. Residual targets come from the actual pretrained outputs.
pub fn pretrain_then_finetune(
    x_s: &DMatrix<f64>,
    y_s: &DVector<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: PretrainFinetuneOptions,
) -> Result<PretrainFinetuneOutcome> {
    check_unit_rows(x_s)?;
    check_len("source input dimension", x.ncols(), x_s.ncols())?;
    let mut net = init_relu_net(opts.m, x.ncols(), opts.kappa, opts.seed)?;
    let pretrain_iters = train_to_tolerance(&mut net, x_s, y_s, opts.eta_source, opts.pretrain_tol, opts.pretrain_max_iters)?;
    let y_tilde = y - net.predict(x);
    let (finetuned, report) = gd_train_relu(
        &net,
        x,
        y,
        ReluGdOptions {
            eta: opts.eta_target,
            iters: opts.finetune_iters,
            record_every: opts.record_every,
            eta_max: None,
        },
    )?;
    Ok(PretrainFinetuneOutcome {
        report,
        pretrained: net,
        finetuned,
        pretrain_iters,
        y_tilde,
    })
}

/// Generalization bounds for fine-tuning from residual targets `y_tilde`.
/// `delta` enters only the separately reported log term.
pub fn ntk_generalization_bounds(
    h_inf: &NtkGram,
    y_tilde: &DVector<f64>,
    teachers: Option<(&TaskVector, &TaskVector)>,
    delta: f64,
) -> Result<NtkBounds> {
    let n = h_inf.h.nrows();
    check_len("residual length", n, y_tilde.len())?;
    if h_inf.lambda_min <= SINGULAR_GRAM_TOL {
        return Err(NtkError::SingularGram { lambda_min: h_inf.lambda_min });
    }
    let chol = Cholesky::new(h_inf.h.clone()).ok_or(NtkError::SingularGram { lambda_min: h_inf.lambda_min })?;
    let solved = chol.solve(y_tilde);
    let quad = y_tilde.dot(&solved).max(0.0);
    let nf = n as f64;
    let log_arg = nf / (h_inf.lambda_min * delta);
    let log_term = (log_arg.ln().max(0.0) / nf).sqrt();
    let (linear_teacher_bound, random_init_bound) = match teachers {
        Some((s, t)) => {
            let dist = t.distance(s).map_err(|_| NtkError::DimensionMismatch {
                what: "teacher dimension",
                expected: t.dim(),
                got: s.dim(),
            })?;
            (Some(6.0 * dist / nf.sqrt()), Some(3.0 * 2.0_f64.sqrt() * t.norm() / nf.sqrt()))
        }
        None => (None, None),
    };
    Ok(NtkBounds {
        finetune_bound: 2.0 * (quad / nf).sqrt(),
        quad_form_sqrt: quad.sqrt(),
        log_term,
        linear_teacher_bound,
        random_init_bound,
    })
}

/// Iteration count `factor * max(1, ln(1 / |y~|)) / (eta lambda_0)`.
pub fn finetune_horizon(eta: f64, lambda_min: f64, y_tilde_norm: f64, factor: f64) -> usize {
    let log_factor = if y_tilde_norm > 0.0 { (1.0 / y_tilde_norm).ln().max(1.0) } else { 1.0 };
    (factor * log_factor / (eta * lambda_min)).ceil() as usize
}
