//! Two-layer ReLU networks in the kernel regime: width sweep of gram and
//! weight drift, loss-curve agreement and bound values.

use finetune_core::datasets::{make_task_pair, sample_unit_sphere, GaussianDesign, ScaledSide, TaskPairMode, TaskPairSpec};
use finetune_core::linalg;
use finetune_core::ntk::{
    finetune_horizon, gd_train_relu, init_relu_net, ntk_gram_infinite, ntk_generalization_bounds, train_to_tolerance,
    NtkBounds, NtkFtReport, ReluGdOptions,
};
use finetune_core::rng;

use crate::config::ExperimentConfig;
use crate::error::{ensure, Result};
use crate::table::ResultTable;

#[derive(Debug, Clone, Copy)]
pub struct NtkSetup {
    pub d: usize,
    pub source_samples: usize,
    pub alignment: f64,
    pub kappa: f64,
    pub eta_scale: f64,
    pub pretrain_tol: f64,
    pub pretrain_max_iters: usize,
    pub horizon_factor: f64,
    pub records: usize,
    pub delta: f64,
}

impl NtkSetup {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            d: cfg.parse("d")?,
            source_samples: cfg.parse("source_samples")?,
            alignment: cfg.parse("alignment")?,
            kappa: cfg.parse("kappa")?,
            eta_scale: cfg.parse("eta_scale")?,
            pretrain_tol: cfg.parse("pretrain_tol")?,
            pretrain_max_iters: cfg.parse("pretrain_max_iters")?,
            horizon_factor: cfg.parse("horizon_factor")?,
            records: cfg.parse("records")?,
            delta: cfg.parse("delta")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NtkTrial {
    pub report: NtkFtReport,
    pub bounds: NtkBounds,
    /// Bounds for exact pretraining, where the residual is `x (theta_t - theta_s)`.
    pub ideal_bounds: NtkBounds,
    /// `|f(x, pretrained) - x theta_s| / sqrt(n)` on the target inputs.
    pub pretrain_residual: f64,
    pub finetune_iters: usize,
    pub teacher_distance: f64,
}

/// Pretrains a width-`m` net on the source teacher, then fine-tunes on `n`
/// target samples for a horizon set by the residual size.
pub fn ntk_trial(setup: &NtkSetup, seed: u64, n: usize, m: usize) -> Result<NtkTrial> {
    let d = setup.d;
    let spec = TaskPairSpec::new(
        TaskPairMode::DirectionFixedScale {
            alpha: 1.0,
            side: ScaledSide::Target,
            alignment: setup.alignment,
        },
        seed,
    );
    let (s, t) = make_task_pair(&spec, &GaussianDesign::isotropic(d)?)?;
    let x = sample_unit_sphere(n, d, rng::mix(seed, 1));
    let xs = sample_unit_sphere(setup.source_samples, d, rng::mix(seed, 2));
    let y = &x * t.as_vector();
    let ys = &xs * s.as_vector();

    let h_source = ntk_gram_infinite(&xs)?;
    let h_target = ntk_gram_infinite(&x)?;
    let eta_source = setup.eta_scale / linalg::spectral_norm_sym(&h_source.h)?;
    let eta = setup.eta_scale / linalg::spectral_norm_sym(&h_target.h)?;

    let mut net = init_relu_net(m, d, setup.kappa, rng::mix(seed, m as u64))?;
    train_to_tolerance(&mut net, &xs, &ys, eta_source, setup.pretrain_tol, setup.pretrain_max_iters)?;
    let u0 = net.predict(&x);
    let y_tilde = &y - &u0;
    let pretrain_residual = (&u0 - &x * s.as_vector()).norm() / (n as f64).sqrt();
    let iters = finetune_horizon(eta, h_target.lambda_min, y_tilde.norm(), setup.horizon_factor);
    let opts = ReluGdOptions {
        eta,
        iters,
        record_every: (iters / setup.records.max(1)).max(1),
        eta_max: None,
    };
    let (_, report) = gd_train_relu(&net, &x, &y, opts)?;
    let bounds = ntk_generalization_bounds(&h_target, &y_tilde, Some((&s, &t)), setup.delta)?;
    let ideal_residual = &x * (t.as_vector() - s.as_vector());
    let ideal_bounds = ntk_generalization_bounds(&h_target, &ideal_residual, Some((&s, &t)), setup.delta)?;
    Ok(NtkTrial {
        report,
        bounds,
        ideal_bounds,
        pretrain_residual,
        finetune_iters: iters,
        teacher_distance: t.distance(&s)?,
    })
}

pub fn run_ntk_experiment(cfg: &ExperimentConfig, verify: bool) -> Result<ResultTable> {
    cfg.validate()?;
    let setup = NtkSetup::from_config(cfg)?;
    let widths: Vec<usize> = cfg.list("widths")?;
    let mut table = ResultTable::new(cfg);
    for &seed in &cfg.seeds {
        for &n in &cfg.n_grid {
            if verify {
                let h = ntk_gram_infinite(&sample_unit_sphere(n, setup.d, rng::mix(seed, 1)))?;
                ensure(h.h.diagonal().iter().all(|&v| v == 0.5), || "infinite-width gram diagonal is not 1/2".into())?;
                ensure(h.lambda_min > 0.0, || format!("infinite-width gram is singular (seed {seed})"))?;
            }
            for &m in &widths {
                let trial = ntk_trial(&setup, seed, n, m)?;
                let b = &trial.bounds;
                if verify {
                    ensure(trial.ideal_bounds.quad_form_sqrt <= 3.0 * trial.teacher_distance + 1e-12, || {
                        format!("residual quadratic form exceeds three teacher distances (seed {seed}, m {m})")
                    })?;
                }
                let r = &trial.report;
                let v = "relu2";
                table.push(seed, n, m, v, "gram_drift", r.max_gram_drift());
                table.push(seed, n, m, v, "gram_drift_from_start", r.max_gram_drift_from_start());
                table.push(seed, n, m, v, "weight_drift", r.weight_drift_max);
                table.push(seed, n, m, v, "curve_deviation", r.max_curve_deviation());
                table.push(seed, n, m, v, "y_tilde_norm", r.y_tilde_norm);
                table.push(seed, n, m, v, "pretrain_residual", trial.pretrain_residual);
                table.push(seed, n, m, v, "finetune_iters", trial.finetune_iters as f64);
                table.push(seed, n, m, v, "final_residual", r.loss_curve.last().map_or(f64::NAN, |p| p.value));
                table.push(seed, n, m, v, "finetune_bound", b.finetune_bound);
                table.push(seed, n, m, v, "ideal_finetune_bound", trial.ideal_bounds.finetune_bound);
                table.push(seed, n, m, v, "log_term", b.log_term);
                table.push(seed, n, m, v, "linear_teacher_bound", b.linear_teacher_bound.unwrap_or(f64::NAN));
                table.push(seed, n, m, v, "random_init_bound", b.random_init_bound.unwrap_or(f64::NAN));
            }
        }
    }
    table.sort();
    Ok(table)
}
