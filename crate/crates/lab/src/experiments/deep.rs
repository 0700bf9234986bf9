//! Deep linear network experiments: depth sweep, source/target scaling and
//! the frozen-first-layer comparison.

use finetune_core::datasets::{
    make_task_pair, two_level_spectrum, GaussianDesign, ScaledSide, TaskPairMode, TaskPairSpec,
};
use finetune_core::deep::{
    balanced_init_from_teacher, default_hidden_dims, fixed_point_predictor, fixed_point_radius, gd_finetune_deep,
    infinite_depth_predictor, small_random_init, suggested_deep_eta, DeepGdOptions,
};
use finetune_core::linalg::{self, ProjectorPair};
use finetune_core::linear::{closed_form_linear, population_risk_linear};
use finetune_core::{rng, TaskVector};
use nalgebra::DVector;

use crate::config::ExperimentConfig;
use crate::error::{ensure, Result};
use crate::table::ResultTable;

fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

fn check_fixed_point(proj: &ProjectorPair, s: &TaskVector, t: &TaskVector, depth: usize, tol: f64, label: &str) -> Result<()> {
    let r = fixed_point_radius(proj, s, t, depth, tol)?;
    let a = proj.perp(s.as_vector()).norm();
    let b = proj.parallel(t.as_vector()).norm();
    let l = depth as f64;
    let residual = r * r - (r / s.norm()).powf(2.0 * (l - 1.0) / l) * a * a - b * b;
    ensure(residual.abs() <= 1e-8 * (r * r).max(1.0), || {
        format!("{label}: norm equation residual {residual:e} at depth {depth}")
    })
}

pub fn run_depth_experiment(cfg: &ExperimentConfig, verify: bool) -> Result<ResultTable> {
    cfg.validate()?;
    let d: usize = cfg.parse("d")?;
    let design = GaussianDesign::isotropic(d)?;
    let alphas: Vec<f64> = cfg.list("alphas")?;
    let depths: Vec<usize> = cfg.list("depths")?;
    let noise_ratio: f64 = cfg.parse("noise_ratio")?;
    let root_tol: f64 = cfg.parse("root_tol")?;
    let mut table = ResultTable::new(cfg);
    for &seed in &cfg.seeds {
        for &n in &cfg.n_grid {
            let x = design.sample(n, rng::mix(seed, n as u64));
            let proj = linalg::projectors_from_rows(&x)?;
            for &alpha in &alphas {
                let spec = TaskPairSpec::new(TaskPairMode::ScaledAligned { alpha, noise_ratio }, seed);
                let (s, t) = make_task_pair(&spec, &design)?;
                let variant = format!("alpha={alpha}");
                for &depth in &depths {
                    let beta = fixed_point_predictor(&proj, &s, &t, depth, root_tol)?;
                    if verify {
                        check_fixed_point(&proj, &s, &t, depth, root_tol, &variant)?;
                        if depth == 1 {
                            let linear = closed_form_linear(&proj, &s, &t)?;
                            ensure(rel_diff(&beta, &linear) <= 1e-9, || {
                                format!("depth one predictor differs from the linear closed form ({variant}, seed {seed})")
                            })?;
                        }
                    }
                    table.push(seed, n, depth, &variant, "risk", population_risk_linear(&beta, &t, &design)?);
                }
                let beta = infinite_depth_predictor(&proj, &s, &t)?;
                table.push(seed, n, 0, &variant, "risk_infinite_depth", population_risk_linear(&beta, &t, &design)?);
            }
        }
    }
    table.sort();
    Ok(table)
}

pub fn run_scaling_experiment(cfg: &ExperimentConfig, verify: bool) -> Result<ResultTable> {
    cfg.validate()?;
    let d: usize = cfg.parse("d")?;
    let design = GaussianDesign::isotropic(d)?;
    let depth: usize = cfg.parse("depth")?;
    let alignment: f64 = cfg.parse("alignment")?;
    let alphas: Vec<f64> = cfg.list("alphas")?;
    let train_gd = cfg.flag("train_gd")?;
    let root_tol: f64 = cfg.parse("root_tol")?;
    let hidden = default_hidden_dims(d, depth);
    let mut table = ResultTable::new(cfg);
    for &seed in &cfg.seeds {
        for &n in &cfg.n_grid {
            let x = design.sample(n, rng::mix(seed, n as u64));
            let proj = linalg::projectors_from_rows(&x)?;
            for (side, side_name) in [(ScaledSide::Source, "source"), (ScaledSide::Target, "target")] {
                for &alpha in &alphas {
                    let spec = TaskPairSpec::new(TaskPairMode::DirectionFixedScale { alpha, side, alignment }, seed);
                    let (s, t) = make_task_pair(&spec, &design)?;
                    let y = &x * t.as_vector();
                    let tag = |model: &str| format!("{side_name}/{model}/alpha={alpha}");
                    let inf = infinite_depth_predictor(&proj, &s, &t)?;
                    if verify {
                        let unit_source = s.scaled(1.0 / s.norm());
                        let reference = infinite_depth_predictor(&proj, &unit_source, &t)?;
                        ensure(rel_diff(&inf, &reference) <= 1e-12, || {
                            format!("infinite-depth predictor depends on the source scale ({})", tag("infinite"))
                        })?;
                        check_fixed_point(&proj, &s, &t, depth, root_tol, &tag("fixed_point"))?;
                    }
                    table.push(seed, n, 0, &tag("infinite"), "risk", population_risk_linear(&inf, &t, &design)?);
                    let fp = fixed_point_predictor(&proj, &s, &t, depth, root_tol)?;
                    table.push(seed, n, depth, &tag("fixed_point"), "risk", population_risk_linear(&fp, &t, &design)?);
                    if train_gd {
                        let net = balanced_init_from_teacher(&s, depth, &hidden, seed)?;
                        let bound = 1.5 * s.norm().max(t.norm());
                        let opts = DeepGdOptions {
                            eta: suggested_deep_eta(&x, depth, bound, cfg.parse("gd_eta_scale")?)?,
                            tol: cfg.parse("gd_tol")?,
                            max_iters: cfg.parse("gd_max_iters")?,
                            ..DeepGdOptions::default()
                        };
                        let res = gd_finetune_deep(&net, &x, &y, opts)?;
                        table.push(seed, n, depth, &tag("gd"), "risk", population_risk_linear(&res.beta, &t, &design)?);
                        table.push(seed, n, depth, &tag("gd"), "fixed_point_rel_error", rel_diff(&res.beta, &fp));
                    }
                }
            }
        }
    }
    table.sort();
    Ok(table)
}

pub const FROZEN: &str = "frozen";
pub const FINETUNE: &str = "finetune";
pub const VANILLA: &str = "vanilla";

/// Settings shared by every seed of the frozen comparison.
#[derive(Debug, Clone)]
pub struct FrozenSetup {
    pub design: GaussianDesign,
    pub align_k: usize,
    pub source_samples: usize,
    pub init_scale: f64,
    pub eta_scale: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub frozen_steps: usize,
}

impl FrozenSetup {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let d: usize = cfg.parse("d")?;
        let spectrum = two_level_spectrum(
            d,
            cfg.parse("top_count")?,
            cfg.parse("top_eigenvalue")?,
            cfg.parse("bottom_eigenvalue")?,
        );
        Ok(Self {
            design: GaussianDesign::random_basis(&spectrum, cfg.parse("design_seed")?)?,
            align_k: cfg.parse("align_k")?,
            source_samples: cfg.parse("source_samples")?,
            init_scale: cfg.parse("init_scale")?,
            eta_scale: cfg.parse("eta_scale")?,
            tol: cfg.parse("tol")?,
            max_iters: cfg.parse("max_iters")?,
            frozen_steps: cfg.parse("frozen_steps")?,
        })
    }
}

/// Outcome of one seed at one sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTrial {
    pub frozen_risk: f64,
    pub frozen_cos_source: f64,
    pub frozen_train_loss: f64,
    pub finetune_risk: f64,
    pub vanilla_risk: f64,
}

/// Two-layer networks: pretrained from a small random init on isotropic
/// source data, then trained on the target either with the first layer
/// frozen or fully; a third net is trained on the target from scratch.
pub fn frozen_trial(setup: &FrozenSetup, seed: u64, n: usize) -> Result<FrozenTrial> {
    let design = &setup.design;
    let d = design.dim();
    let hidden = default_hidden_dims(d, 2);
    let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::BottomEigenAlign { k: setup.align_k }, seed), design)?;

    let xs = GaussianDesign::isotropic(d)?.sample(setup.source_samples, rng::mix(seed, 0x50));
    let ys = &xs * s.as_vector();
    let init = small_random_init(d, 2, &hidden, setup.init_scale, seed)?;
    let pre = DeepGdOptions {
        eta: suggested_deep_eta(&xs, 2, 1.5 * s.norm(), setup.eta_scale)?,
        tol: setup.tol,
        max_iters: setup.max_iters,
        ..DeepGdOptions::default()
    };
    let pretrained = gd_finetune_deep(&init, &xs, &ys, pre)?.net_final;

    let x = design.sample(n, rng::mix(seed, n as u64));
    let y = &x * t.as_vector();
    let full = DeepGdOptions {
        eta: suggested_deep_eta(&x, 2, 1.5 * s.norm().max(t.norm()), setup.eta_scale)?,
        tol: setup.tol,
        max_iters: setup.max_iters,
        ..DeepGdOptions::default()
    };
    let frozen = gd_finetune_deep(
        &pretrained,
        &x,
        &y,
        DeepGdOptions {
            max_iters: setup.frozen_steps,
            frozen_prefix: 1,
            ..full
        },
    )?;
    let finetuned = gd_finetune_deep(&pretrained, &x, &y, full)?;
    let scratch = small_random_init(d, 2, &hidden, setup.init_scale, rng::mix(seed, 77))?;
    let vanilla = gd_finetune_deep(&scratch, &x, &y, full)?;
    Ok(FrozenTrial {
        frozen_risk: population_risk_linear(&frozen.beta, &t, design)?,
        frozen_cos_source: cosine(&frozen.beta, s.as_vector()),
        frozen_train_loss: frozen.final_train_loss,
        finetune_risk: population_risk_linear(&finetuned.beta, &t, design)?,
        vanilla_risk: population_risk_linear(&vanilla.beta, &t, design)?,
    })
}

pub fn run_frozen_experiment(cfg: &ExperimentConfig, verify: bool) -> Result<ResultTable> {
    cfg.validate()?;
    let setup = FrozenSetup::from_config(cfg)?;
    let mut table = ResultTable::new(cfg);
    for &seed in &cfg.seeds {
        for &n in &cfg.n_grid {
            let trial = frozen_trial(&setup, seed, n)?;
            if verify {
                ensure(trial.frozen_cos_source.abs() >= 0.999, || {
                    format!("frozen run left the source direction: cos {} (seed {seed}, n {n})", trial.frozen_cos_source)
                })?;
            }
            table.push(seed, n, 2, FROZEN, "risk", trial.frozen_risk);
            table.push(seed, n, 2, FROZEN, "cos_source", trial.frozen_cos_source);
            table.push(seed, n, 2, FROZEN, "train_loss", trial.frozen_train_loss);
            table.push(seed, n, 2, FINETUNE, "risk", trial.finetune_risk);
            table.push(seed, n, 2, VANILLA, "risk", trial.vanilla_risk);
        }
    }
    table.sort();
    Ok(table)
}
