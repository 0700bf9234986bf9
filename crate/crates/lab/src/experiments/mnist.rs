//! Correlation between observed transfer error on MNIST digit pairs and
//! risk predictors computed from the source and target teachers.

use std::path::{Path, PathBuf};

use finetune_core::datasets::mnist::{build_mnist_task, load_mnist_dir, mnist_files_present, zero_one_error, MnistSplits, MnistTask, MnistTaskOptions};
use finetune_core::linalg::{self, EigenDecomp};
use finetune_core::linear::risk_upper_bound_concentration;
use finetune_core::{rng, TaskVector};
use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::config::ExperimentConfig;
use crate::error::{ensure, LabError, Result};
use crate::stats;
use crate::table::ResultTable;

pub const DATA_ENV: &str = "FINETUNE_LAB_DATA";

/// What a predictor sees for one transfer pair.
pub struct TransferContext<'a> {
    pub source: &'a TaskVector,
    pub target: &'a TaskVector,
    /// Second-moment eigendecomposition of the target inputs.
    pub target_moment: &'a EigenDecomp,
    pub n: usize,
}

/// A scalar risk predictor evaluated per transfer pair.
pub trait BoundPredictor {
    fn name(&self) -> &str;
    fn predict(&self, ctx: &TransferContext<'_>) -> Result<f64>;
}

/// `|theta_t - theta_s|^2`.
pub struct TeacherDistance;

impl BoundPredictor for TeacherDistance {
    fn name(&self) -> &str {
        "teacher_distance_sq"
    }

    fn predict(&self, ctx: &TransferContext<'_>) -> Result<f64> {
        Ok(ctx.target.distance(ctx.source)?.powi(2))
    }
}

/// Concentration bound with a fixed split index `k`.
pub struct ConcentrationBound {
    pub k: usize,
    pub c: f64,
    pub delta: f64,
    label: String,
}

impl ConcentrationBound {
    pub fn new(k: usize, c: f64, delta: f64) -> Self {
        Self {
            k,
            c,
            delta,
            label: format!("concentration_bound_k{k}"),
        }
    }
}

impl BoundPredictor for ConcentrationBound {
    fn name(&self) -> &str {
        &self.label
    }

    fn predict(&self, ctx: &TransferContext<'_>) -> Result<f64> {
        let r = risk_upper_bound_concentration(ctx.target_moment, ctx.n, self.delta, self.c, ctx.source, ctx.target, self.k)?;
        Ok(r.concentration_bound)
    }
}

/// The data directory from `data_dir`, falling back to `FINETUNE_LAB_DATA`.
pub fn data_dir(cfg: &ExperimentConfig) -> Option<PathBuf> {
    match cfg.raw("data_dir") {
        Ok(p) if !p.is_empty() => Some(PathBuf::from(p)),
        _ => std::env::var_os(DATA_ENV).map(PathBuf::from),
    }
}

pub fn dataset_available(cfg: &ExperimentConfig) -> bool {
    data_dir(cfg).is_some_and(|p| mnist_files_present(&p))
}

fn parse_pairs(text: &str) -> Result<Vec<(u8, u8)>> {
    text.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once('-')
                .ok_or_else(|| LabError::Config(format!("bad digit pair {p:?}")))?;
            let digit = |s: &str| s.trim().parse::<u8>().map_err(|_| LabError::Config(format!("bad digit pair {p:?}")));
            Ok((digit(a)?, digit(b)?))
        })
        .collect()
}

/// `theta + x^T (x x^T)^+ (y - x theta)`: the interpolating predictor closest
/// to `theta`, computed through the `n x n` gram matrix.
pub fn min_norm_correction(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = x * x.transpose();
    let e = linalg::eig_sym(&gram)?;
    let top = e.values().amax();
    let coords = e.vectors().tr_mul(&(y - x * theta));
    let scaled = DVector::from_iterator(
        coords.len(),
        coords
            .iter()
            .zip(e.values().iter())
            .map(|(c, &l)| if l > 1e-10 * top { c / l } else { 0.0 }),
    );
    Ok(theta + x.tr_mul(&(e.vectors() * scaled)))
}

struct PreparedTask {
    task: MnistTask,
    moment: EigenDecomp,
}

fn prepare(raw: &MnistSplits, pairs: &[(u8, u8)], center: bool) -> Result<Vec<PreparedTask>> {
    pairs
        .iter()
        .map(|&pair| {
            let task = build_mnist_task(raw, pair, 0, MnistTaskOptions { center })?;
            let moment = linalg::eig_covariance(&linalg::empirical_covariance(&task.x_train)?)?;
            Ok(PreparedTask { task, moment })
        })
        .collect()
}

pub fn run_mnist_correlation(cfg: &ExperimentConfig, verify: bool) -> Result<ResultTable> {
    cfg.validate()?;
    let dir = data_dir(cfg).ok_or_else(|| LabError::DatasetMissing("<unset>".into()))?;
    if !mnist_files_present(&dir) {
        return Err(LabError::DatasetMissing(dir.display().to_string()));
    }
    run_mnist_from_dir(cfg, &dir, &[], verify)
}

/// Runs the correlation study on the files in `dir` with extra predictors.
pub fn run_mnist_from_dir(
    cfg: &ExperimentConfig,
    dir: &Path,
    plugins: &[&dyn BoundPredictor],
    verify: bool,
) -> Result<ResultTable> {
    let raw = load_mnist_dir(dir)?;
    let pairs = parse_pairs(cfg.raw("pairs")?)?;
    let tasks = prepare(&raw, &pairs, cfg.flag("center")?)?;
    let resamples: usize = cfg.parse("resamples")?;
    let ours = ConcentrationBound::new(cfg.parse("bound_k")?, cfg.parse("c")?, cfg.parse("delta")?);
    let mut predictors: Vec<&dyn BoundPredictor> = vec![&TeacherDistance, &ours];
    predictors.extend_from_slice(plugins);

    let mut table = ResultTable::new(cfg);
    for &rep in &cfg.seeds {
        for &n in &cfg.n_grid {
            let mut errors = Vec::new();
            let mut predicted = vec![Vec::new(); predictors.len()];
            for (si, source) in tasks.iter().enumerate() {
                for (ti, target) in tasks.iter().enumerate() {
                    if si == ti {
                        continue;
                    }
                    let tt = &target.task;
                    let avail = tt.x_train.nrows();
                    if n > avail {
                        return Err(LabError::Config(format!("n = {n} exceeds the {avail} training rows of {:?}", tt.digits)));
                    }
                    let mut errs = Vec::with_capacity(resamples);
                    for r in 0..resamples {
                        let stream_seed = rng::mix(rng::mix(rep, n as u64), ((si * 16 + ti) * 1024 + r) as u64);
                        let idx = index::sample(&mut rng::stream(stream_seed, 0x4D), avail, n).into_vec();
                        let x = tt.x_train.select_rows(idx.iter());
                        let y = tt.y_train.select_rows(idx.iter());
                        let w = min_norm_correction(&x, &y, source.task.teacher.as_vector())?;
                        if verify {
                            let fit = (&x * &w - &y).norm() / (n as f64).sqrt();
                            ensure(fit <= 1e-6, || format!("fine-tuned predictor misses the training labels by {fit:e}"))?;
                        }
                        errs.push(zero_one_error(&tt.x_test, &w, &tt.y_test));
                    }
                    let mean_err = stats::mean(&errs);
                    let variant = format!("pair_{}{}_to_{}{}", source.task.digits.0, source.task.digits.1, tt.digits.0, tt.digits.1);
                    table.push(rep, n, 0, &variant, "mean_test_error", mean_err);
                    errors.push(mean_err);
                    let ctx = TransferContext {
                        source: &source.task.teacher,
                        target: &tt.teacher,
                        target_moment: &target.moment,
                        n,
                    };
                    for (pi, p) in predictors.iter().enumerate() {
                        let value = p.predict(&ctx)?;
                        table.push(rep, n, 0, &variant, p.name(), value);
                        predicted[pi].push(value);
                    }
                }
            }
            for (pi, p) in predictors.iter().enumerate() {
                table.push(rep, n, 0, p.name(), "r_squared", stats::r_squared(&predicted[pi], &errors));
            }
        }
    }
    table.sort();
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correction_interpolates_and_stays_near_start() {
        let x = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let theta = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let w = min_norm_correction(&x, &y, &theta).unwrap();
        assert!((&x * &w - &y).norm() < 1e-12);
        // Movement lies in the row space: coordinate 4 is untouched.
        assert_eq!(w[3], 0.5);
        assert!((w[0] - w[2]).abs() < 1e-12);
    }

    #[test]
    fn pair_list_parsing() {
        assert_eq!(parse_pairs("0-1, 2-3").unwrap(), vec![(0, 1), (2, 3)]);
        assert!(parse_pairs("0:1").is_err());
        assert!(parse_pairs("a-1").is_err());
    }
}
