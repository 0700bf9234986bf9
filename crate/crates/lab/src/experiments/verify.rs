//! Fast oracle battery over small instances of every model.

use finetune_core::datasets::{make_task_pair, sample_unit_sphere, two_level_spectrum, GaussianDesign, TaskPairMode, TaskPairSpec};
use finetune_core::deep::{fixed_point_predictor, infinite_depth_predictor};
use finetune_core::linalg;
use finetune_core::linear::{
    closed_form_linear, closed_form_risk, gd_finetune_linear, population_risk_linear, risk_upper_bound_empirical,
    select_k_heuristic, GdOptions,
};
use finetune_core::ntk::{init_relu_net, ntk_gram_finite, ntk_gram_infinite, ntk_generalization_bounds};
use finetune_core::{rng, TaskVector};

use crate::error::{ensure, Result};

fn linear_gd_matches_closed_form() -> Result<()> {
    let design = GaussianDesign::isotropic(20)?;
    for seed in 0..10 {
        let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::Random, seed), &design)?;
        let x = design.sample(8, seed);
        let y = &x * t.as_vector();
        let gd = gd_finetune_linear(&x, &y, &s, GdOptions { tol: 1e-26, ..GdOptions::default() })?;
        let exact = closed_form_linear(&linalg::projectors_from_rows(&x)?, &s, &t)?;
        let err = (&gd.gamma - &exact).norm();
        ensure(err <= 1e-6 * (1.0 + exact.norm()), || format!("seed {seed}: GD differs from closed form by {err:e}"))?;
    }
    Ok(())
}

fn empirical_bound_dominates_risk() -> Result<()> {
    let spiked = GaussianDesign::random_basis(&two_level_spectrum(60, 6, 1.5, 0.3), 1)?;
    for design in [GaussianDesign::isotropic(40)?, spiked] {
        let k = select_k_heuristic(design.eigen(), 0.5);
        for seed in 0..10 {
            let mode = TaskPairMode::BottomEigenAlign { k: k.min(design.dim() - 1).max(1) };
            let (s, t) = make_task_pair(&TaskPairSpec::new(mode, seed), &design)?;
            let x = design.sample(15, seed);
            let proj = linalg::projectors_from_rows(&x)?;
            let risk = closed_form_risk(&proj, &s, &t, &design)?;
            let direct = population_risk_linear(&closed_form_linear(&proj, &s, &t)?, &t, &design)?;
            ensure((risk - direct).abs() <= 1e-9 * direct.max(1e-12), || format!("seed {seed}: risk identity"))?;
            let bound = risk_upper_bound_empirical(design.eigen(), &x, &s, &t, k)?.empirical_bound;
            ensure(bound >= risk, || format!("seed {seed}: bound {bound:e} below risk {risk:e}"))?;
        }
    }
    Ok(())
}

fn deep_predictors_consistent() -> Result<()> {
    let design = GaussianDesign::isotropic(12)?;
    for seed in 0..10 {
        let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::Random, seed), &design)?;
        let x = design.sample(4, seed);
        let proj = linalg::projectors_from_rows(&x)?;
        let one = fixed_point_predictor(&proj, &s, &t, 1, 1e-14)?;
        let lin = closed_form_linear(&proj, &s, &t)?;
        ensure((&one - &lin).norm() <= 1e-9 * lin.norm(), || format!("seed {seed}: depth one is not linear"))?;
        let inf = infinite_depth_predictor(&proj, &s, &t)?;
        let inf10 = infinite_depth_predictor(&proj, &s.scaled(10.0), &t)?;
        ensure((&inf - &inf10).norm() <= 1e-12 * inf.norm(), || format!("seed {seed}: source scale leaks"))?;
    }
    Ok(())
}

fn ntk_kernels_consistent() -> Result<()> {
    let x = sample_unit_sphere(6, 4, 3);
    let h = ntk_gram_infinite(&x)?;
    ensure(h.h.diagonal().iter().all(|&v| v == 0.5), || "diagonal is not 1/2".into())?;
    let net = init_relu_net(20_000, 4, 1.0, 5)?;
    let finite = ntk_gram_finite(&net, &x)?;
    let gap = (&finite.h - &h.h).amax();
    ensure(gap <= 0.03, || format!("finite-width gram is {gap:e} from the limit"))?;
    for seed in 0..10 {
        let mut r = rng::stream(seed, 0x99);
        let s = TaskVector::new(rng::unit_vector(&mut r, 4))?;
        let t = TaskVector::new(rng::unit_vector(&mut r, 4))?;
        let y_tilde = &x * (t.as_vector() - s.as_vector());
        let b = ntk_generalization_bounds(&h, &y_tilde, Some((&s, &t)), 0.05)?;
        let dist = t.distance(&s)?;
        ensure(b.quad_form_sqrt <= 3.0 * dist, || format!("seed {seed}: quadratic form above 3 |delta|"))?;
    }
    Ok(())
}

/// Runs every check and returns `(name, outcome)` pairs.
pub fn run_verify() -> Vec<(&'static str, Result<()>)> {
    vec![
        ("linear gradient descent vs closed form", linear_gd_matches_closed_form()),
        ("empirical bound vs exact risk", empirical_bound_dominates_risk()),
        ("deep predictors", deep_predictors_consistent()),
        ("kernel gram matrices and bounds", ntk_kernels_consistent()),
    ]
}
