//! Linear fine-tuning risk against sample size for two kinds of task shift:
//! shift outside the top eigenspace and shift inside it.

use finetune_core::datasets::{design_preset, make_task_pair, TaskPairMode, TaskPairSpec};
use finetune_core::linalg;
use finetune_core::linear::{
    closed_form_linear, closed_form_risk, population_risk_linear, risk_upper_bound_concentration,
    risk_upper_bound_empirical, select_k_heuristic,
};
use finetune_core::rng;

use crate::config::ExperimentConfig;
use crate::error::{ensure, LabError, Result};
use crate::table::ResultTable;

pub const TOP_ALIGN: &str = "top_eigen_align";
pub const BOTTOM_ALIGN: &str = "bottom_eigen_align";

pub fn run_fig1(cfg: &ExperimentConfig, verify: bool) -> Result<ResultTable> {
    cfg.validate()?;
    let design = design_preset(cfg.raw("design")?, cfg.parse("design_seed")?)?;
    let d = design.dim();
    let align_k: usize = cfg.parse("align_k")?;
    let (c, delta): (f64, f64) = (cfg.parse("c")?, cfg.parse("delta")?);
    let bound_k = match cfg.raw("bound_k")? {
        "auto" => select_k_heuristic(design.eigen(), cfg.parse("gap_ratio")?),
        _ => cfg.parse("bound_k")?,
    };
    if let Some(&n) = cfg.n_grid.iter().find(|&&n| n > d) {
        return Err(LabError::Config(format!("n = {n} exceeds the dimension {d}")));
    }
    let mut table = ResultTable::new(cfg);
    for &seed in &cfg.seeds {
        let mut pairs = Vec::with_capacity(2);
        for (name, mode) in [
            (TOP_ALIGN, TaskPairMode::TopEigenAlign { k: align_k }),
            (BOTTOM_ALIGN, TaskPairMode::BottomEigenAlign { k: align_k }),
        ] {
            let spec = TaskPairSpec {
                source_norm: cfg.parse("source_norm")?,
                diff_norm: cfg.parse("diff_norm")?,
                ..TaskPairSpec::new(mode, seed)
            };
            pairs.push((name, make_task_pair(&spec, &design)?));
        }
        for &n in &cfg.n_grid {
            let x = design.sample(n, rng::mix(seed, n as u64));
            let proj = linalg::projectors_from_rows(&x)?;
            for (name, (s, t)) in &pairs {
                let risk = closed_form_risk(&proj, s, t, &design)?;
                let emp = risk_upper_bound_empirical(design.eigen(), &x, s, t, bound_k)?;
                let conc = risk_upper_bound_concentration(design.eigen(), n, delta, c, s, t, bound_k)?;
                if verify {
                    let direct = population_risk_linear(&closed_form_linear(&proj, s, t)?, t, &design)?;
                    ensure((direct - risk).abs() <= 1e-9 * direct.abs().max(1e-12), || {
                        format!("fig1 {name} seed {seed} n {n}: risk identity {direct:e} vs {risk:e}")
                    })?;
                    ensure(emp.empirical_bound >= risk, || {
                        format!("fig1 {name} seed {seed} n {n}: bound {:e} below risk {risk:e}", emp.empirical_bound)
                    })?;
                }
                table.push(seed, n, 0, name, "risk", risk);
                table.push(seed, n, 0, name, "empirical_bound", emp.empirical_bound);
                table.push(seed, n, 0, name, "concentration_bound", conc.concentration_bound);
                table.push(seed, n, 0, name, "sigma_gap", emp.sigma_gap);
            }
        }
    }
    table.sort();
    Ok(table)
}
