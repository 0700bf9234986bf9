use finetune_core::datasets::{make_task_pair, GaussianDesign, TaskPairMode, TaskPairSpec};
use finetune_core::deep::{
    balanced_init_from_teacher, balancedness_residual, default_hidden_dims, deep_population_risk, fixed_point_predictor,
    gd_finetune_deep, infinite_depth_predictor, DeepGdOptions,
};
use finetune_core::linalg::projectors_from_rows;
use finetune_core::linear::{closed_form_linear, population_risk_linear};
use finetune_core::{rng, TaskVector};
use proptest::prelude::*;

fn shifted_pair(seed: u64, d: usize, shift: f64) -> (TaskVector, TaskVector) {
    let design = GaussianDesign::isotropic(d).unwrap();
    let (s, _) = make_task_pair(&TaskPairSpec::new(TaskPairMode::Random, seed), &design).unwrap();
    let t = TaskVector::new(s.as_vector() + rng::unit_vector(&mut rng::stream(seed, 5), d) * shift).unwrap();
    (s, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn balanced_init_reproduces_teacher(seed in any::<u64>(), d in 2usize..20, depth in 1usize..7, extra in 0usize..4) {
        let (s, _) = shifted_pair(seed, d, 0.0);
        let hidden = vec![d + extra; depth - 1];
        let net = balanced_init_from_teacher(&s, depth, &hidden, seed).unwrap();
        prop_assert!((net.end_to_end() - s.as_vector()).norm() <= 1e-12 * s.norm().max(1.0));
        prop_assert!(balancedness_residual(&net) <= 1e-12);
    }

    #[test]
    fn depth_one_fixed_point_is_linear_closed_form(seed in any::<u64>(), d in 3usize..30, frac in 0.1f64..0.9) {
        let n = ((d as f64 * frac) as usize).clamp(1, d - 1);
        let (s, t) = shifted_pair(seed, d, 0.7);
        let x = GaussianDesign::isotropic(d).unwrap().sample(n, seed);
        let proj = projectors_from_rows(&x).unwrap();
        let one = fixed_point_predictor(&proj, &s, &t, 1, 1e-15).unwrap();
        let lin = closed_form_linear(&proj, &s, &t).unwrap();
        prop_assert!((&one - &lin).norm() <= 1e-12 * lin.norm().max(1.0));
    }

    #[test]
    fn infinite_depth_ignores_source_scale(seed in any::<u64>(), d in 3usize..30, frac in 0.1f64..0.9, scale in 0.01f64..100.0) {
        let n = ((d as f64 * frac) as usize).clamp(1, d - 1);
        let (s, t) = shifted_pair(seed, d, 0.5);
        let x = GaussianDesign::isotropic(d).unwrap().sample(n, seed);
        let proj = projectors_from_rows(&x).unwrap();
        let a = infinite_depth_predictor(&proj, &s, &t).unwrap();
        let b = infinite_depth_predictor(&proj, &s.scaled(scale), &t).unwrap();
        prop_assert!((&a - &b).norm() <= 1e-12 * a.norm());
    }

    #[test]
    fn depth_helps_on_scaled_tasks(seed in any::<u64>(), alpha in 1.2f64..6.0) {
        let d = 50;
        let design = GaussianDesign::isotropic(d).unwrap();
        let spec = TaskPairSpec::new(TaskPairMode::ScaledAligned { alpha, noise_ratio: 0.0 }, seed);
        let (s, t) = make_task_pair(&spec, &design).unwrap();
        let x = design.sample(5, seed);
        let proj = projectors_from_rows(&x).unwrap();
        let mut prev = f64::INFINITY;
        for depth in [1, 2, 3, 5, 8, 13] {
            let beta = fixed_point_predictor(&proj, &s, &t, depth, 1e-15).unwrap();
            let risk = population_risk_linear(&beta, &t, &design).unwrap();
            prop_assert!(risk <= prev * (1.0 + 1e-9), "depth {depth}: {risk} > {prev}");
            prev = risk;
        }
        prop_assert!(deep_population_risk(&s, &t, &design, &proj).unwrap() <= prev + 1e-12);
    }
}

fn gd_instance(seed: u64) -> (TaskVector, TaskVector, nalgebra::DMatrix<f64>) {
    let d = 8;
    let (s, t) = shifted_pair(seed, d, 0.1);
    let x = GaussianDesign::isotropic(d).unwrap().sample(3, seed ^ 7);
    (s, t, x)
}

#[test]
fn gd_conserves_off_span_part_of_first_layer_and_interpolates() {
    for seed in 0..6 {
        for depth in [2, 3] {
            let (s, t, x) = gd_instance(seed);
            let y = &x * t.as_vector();
            let net = balanced_init_from_teacher(&s, depth, &default_hidden_dims(8, depth), seed).unwrap();
            let opts = DeepGdOptions { tol: 1e-20, ..DeepGdOptions::default() };
            let res = gd_finetune_deep(&net, &x, &y, opts).unwrap();
            let proj = projectors_from_rows(&x).unwrap();
            let perp = proj.perp_matrix();
            let w0 = &net.layers()[0];
            let moved = (&perp * (&res.net_final.layers()[0] - w0)).norm();
            assert!(moved <= 1e-6 * w0.norm(), "off-span drift {moved:e}");
            let fit = (&x * &res.beta - &y).norm_squared() / 3.0;
            assert!(fit <= 1e-10);
            let par_gap = (proj.parallel(&res.beta) - proj.parallel(t.as_vector())).norm();
            assert!(par_gap <= 1e-6, "parallel gap {par_gap:e}");
        }
    }
}

#[test]
fn balancedness_drift_halves_with_half_step() {
    for seed in 0..3 {
        let (s, t, x) = gd_instance(seed);
        let y = &x * t.as_vector();
        let net = balanced_init_from_teacher(&s, 3, &default_hidden_dims(8, 3), seed).unwrap();
        let drift = |eta: f64, steps: usize| {
            let opts = DeepGdOptions {
                eta,
                tol: 0.0,
                max_iters: steps,
                allow_unconverged: true,
                ..DeepGdOptions::default()
            };
            gd_finetune_deep(&net, &x, &y, opts).unwrap().trajectory.last().unwrap().balancedness_drift
        };
        let (a, b) = (drift(2e-3, 500), drift(1e-3, 1000));
        assert!(b <= 0.5 * a, "drift {a:e} -> {b:e}");
    }
}

#[test]
fn frozen_first_layer_keeps_source_direction() {
    for seed in 0..5 {
        let d = 10;
        let design = GaussianDesign::isotropic(d).unwrap();
        let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::Random, seed), &design).unwrap();
        let x = design.sample(6, seed);
        let y = &x * t.as_vector();
        let net = balanced_init_from_teacher(&s, 2, &[d], seed).unwrap();
        let opts = DeepGdOptions {
            eta: 1e-2,
            max_iters: 5000,
            frozen_prefix: 1,
            ..DeepGdOptions::default()
        };
        let res = gd_finetune_deep(&net, &x, &y, opts).unwrap();
        assert!(!res.converged);
        let cos = res.beta.dot(s.as_vector()) / (res.beta.norm() * s.norm());
        assert!(cos.abs() >= 0.999, "cos {cos}");
    }
}
