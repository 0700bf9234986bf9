use finetune_core::datasets::{make_task_pair, two_level_spectrum, GaussianDesign, TaskPairMode, TaskPairSpec};
use finetune_core::linalg::{self, projectors_from_rows};
use finetune_core::linear::{
    closed_form_linear, closed_form_risk, concentration_g, davis_kahan_gap, gd_finetune_linear, population_risk_linear,
    risk_upper_bound_concentration, risk_upper_bound_empirical, select_k_heuristic, GdOptions,
};
use proptest::prelude::*;

fn design_for(seed: u64, d: usize, spiked: bool) -> GaussianDesign {
    if spiked {
        GaussianDesign::random_basis(&two_level_spectrum(d, (d / 4).max(1), 2.0, 0.4), seed).unwrap()
    } else {
        GaussianDesign::isotropic(d).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gd_matches_closed_form_and_stays_in_span(seed in any::<u64>(), d in 4usize..=50, frac in 0.1f64..0.9, spiked in any::<bool>()) {
        let n = ((d as f64 * frac) as usize).clamp(1, d - 1);
        let design = design_for(seed, d, spiked);
        let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::Random, seed), &design).unwrap();
        let x = design.sample(n, seed ^ 1);
        let y = &x * t.as_vector();
        let gd = gd_finetune_linear(&x, &y, &s, GdOptions { tol: 1e-22, ..GdOptions::default() }).unwrap();
        let proj = projectors_from_rows(&x).unwrap();
        let exact = closed_form_linear(&proj, &s, &t).unwrap();
        prop_assert!((&gd.gamma - &exact).norm() <= 1e-6 * (1.0 + exact.norm()));
        prop_assert!(proj.perp(&(&gd.gamma - s.as_vector())).norm() <= 1e-8);
    }

    #[test]
    fn risk_identity_and_bound_chain(seed in any::<u64>(), d in 6usize..=60, frac in 0.05f64..0.95, mode_pick in 0usize..3) {
        let n = ((d as f64 * frac) as usize).clamp(1, d - 1);
        let design = design_for(seed, d, true);
        let k = select_k_heuristic(design.eigen(), 0.5);
        let mode = match mode_pick {
            0 => TaskPairMode::TopEigenAlign { k },
            1 => TaskPairMode::BottomEigenAlign { k },
            _ => TaskPairMode::Random,
        };
        let (s, t) = make_task_pair(&TaskPairSpec::new(mode, seed), &design).unwrap();
        let x = design.sample(n, seed ^ 2);
        let proj = projectors_from_rows(&x).unwrap();
        let risk = closed_form_risk(&proj, &s, &t, &design).unwrap();
        let direct = population_risk_linear(&closed_form_linear(&proj, &s, &t).unwrap(), &t, &design).unwrap();
        prop_assert!((risk - direct).abs() <= 1e-9 * direct.max(1e-300));
        for kk in [1, k, d] {
            let bound = risk_upper_bound_empirical(design.eigen(), &x, &s, &t, kk).unwrap();
            prop_assert!(bound.empirical_bound >= risk, "k {kk}: bound {} < risk {risk}", bound.empirical_bound);
        }
    }

    #[test]
    fn davis_kahan_inequality(seed in any::<u64>(), d in 6usize..=40, frac in 0.1f64..0.9, kfrac in 0.0f64..1.0) {
        let n = ((d as f64 * frac) as usize).clamp(1, d - 1);
        let k = ((d as f64 * kfrac) as usize).clamp(1, d);
        let design = design_for(seed, d, true);
        let x = design.sample(n, seed ^ 3);
        let lhs = davis_kahan_gap(design.eigen(), &x, k).unwrap();
        let gap = linalg::covariance_gap_norm(design.eigen(), &x).unwrap();
        let rhs = gap / design.eigen().values()[k - 1];
        prop_assert!(lhs <= rhs + 1e-10, "{lhs} > {rhs}");
    }

    #[test]
    fn concentration_scale_non_increasing_in_n(seed in any::<u64>(), d in 2usize..50, delta in 1.0f64..10.0) {
        let design = design_for(seed, d, true);
        let mut prev = f64::INFINITY;
        for n in 1..200 {
            let g = concentration_g(design.eigen(), n, delta, 1.0).unwrap();
            prop_assert!(g <= prev);
            prev = g;
        }
    }
}

#[test]
fn identity_covariance_at_n_equals_d_gives_unit_scale() {
    let design = GaussianDesign::isotropic(30).unwrap();
    assert!((concentration_g(design.eigen(), 30, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn equal_teachers_give_zero_bounds() {
    let design = GaussianDesign::random_basis(&two_level_spectrum(20, 4, 1.5, 0.3), 4).unwrap();
    let (s, _) = make_task_pair(&TaskPairSpec::new(TaskPairMode::Random, 4), &design).unwrap();
    let x = design.sample(8, 4);
    assert_eq!(risk_upper_bound_empirical(design.eigen(), &x, &s, &s, 4).unwrap().empirical_bound, 0.0);
    assert_eq!(risk_upper_bound_concentration(design.eigen(), 8, 1.0, 1.0, &s, &s, 4).unwrap().concentration_bound, 0.0);
}

#[test]
fn fig1_concentration_scale_shrinks_and_cubic_term_dominates_at_small_n() {
    let design = finetune_core::datasets::design_preset("fig1", 0).unwrap();
    let gs: Vec<f64> = [10, 100, 1000].iter().map(|&n| concentration_g(design.eigen(), n, 1.0, 1.0).unwrap()).collect();
    assert!(gs[0] > gs[1] && gs[1] > gs[2]);
    // Shift inside the top-50 eigenspace: only the cubic term is active.
    let spec = TaskPairSpec::new(TaskPairMode::BottomEigenAlign { k: 50 }, 1);
    let (s, t) = make_task_pair(&spec, &design).unwrap();
    let r = risk_upper_bound_concentration(design.eigen(), 10, 1.0, 1.0, &s, &t, 50).unwrap();
    let lambda_k = design.eigen().values()[49];
    let cubic = 2.0 * r.g_value.powi(3) / (lambda_k * lambda_k);
    assert!((r.concentration_bound - cubic).abs() <= 1e-9 * cubic);
    assert!(cubic > 2.0 * r.g_value);
}
