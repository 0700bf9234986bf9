//! Synthetic Gaussian designs, teacher pairs and the MNIST reader.

pub mod mnist;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{EigenDecomp, LinalgError};
use crate::rng;
use crate::task::{TaskError, TaskVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("spectrum is empty")]
    EmptySpectrum,
    #[error("spectrum entry {index} is negative ({value})")]
    NegativeEigenvalue { index: usize, value: f64 },
    #[error("spectrum is not sorted in descending order at index {index}")]
    NotDescending { index: usize },
    #[error("spectrum entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid task-pair parameter: {0}")]
    BadTaskSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Zero-mean Gaussian input distribution with covariance `V diag(spectrum) V^T`.
#[derive(Debug, Clone)]
pub struct GaussianDesign {
    eig: EigenDecomp,
}

fn validate_spectrum(spectrum: &[f64]) -> Result<(), DesignError> {
    if spectrum.is_empty() {
        return Err(DesignError::EmptySpectrum);
    }
    for (i, &v) in spectrum.iter().enumerate() {
        if !v.is_finite() {
            return Err(DesignError::NonFinite { index: i });
        }
        if v < 0.0 {
            return Err(DesignError::NegativeEigenvalue { index: i, value: v });
        }
        if i > 0 && v > spectrum[i - 1] {
            return Err(DesignError::NotDescending { index: i });
        }
    }
    Ok(())
}

impl GaussianDesign {
    /// Covariance with the given descending spectrum in a seeded uniformly
    /// random orthonormal basis.
    pub fn random_basis(spectrum: &[f64], seed: u64) -> Result<Self, DesignError> {
        validate_spectrum(spectrum)?;
        let d = spectrum.len();
        let g = rng::gaussian_matrix(&mut rng::stream(seed, 0xD5), d, d);
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        // Fix column signs so the basis is Haar distributed.
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let eig = EigenDecomp::from_parts(q, DVector::from_column_slice(spectrum))?;
        Ok(Self { eig })
    }

    /// Covariance diagonal in the standard basis.
    pub fn axis_aligned(spectrum: &[f64]) -> Result<Self, DesignError> {
        validate_spectrum(spectrum)?;
        let d = spectrum.len();
        let eig = EigenDecomp::from_parts(DMatrix::identity(d, d), DVector::from_column_slice(spectrum))?;
        Ok(Self { eig })
    }

    pub fn isotropic(d: usize) -> Result<Self, DesignError> {
        Self::axis_aligned(&vec![1.0; d])
    }

    pub fn dim(&self) -> usize {
        self.eig.dim()
    }

    pub fn eigen(&self) -> &EigenDecomp {
        &self.eig
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.eig.reconstruct()
    }

    /// `n x d` matrix of i.i.d. rows drawn from the design.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let d = self.dim();
        let z = rng::gaussian_matrix(&mut rng::stream(seed, 0x5A), n, d);
        let sqrt_l = self.eig.values().map(|v| v.sqrt());
        let scaled = self.eig.vectors() * DMatrix::from_diagonal(&sqrt_l);
        z * scaled.transpose()
    }
}

/// Spectrum with `top_count` entries equal to `top` followed by
/// `dim - top_count` entries equal to `bottom`.
pub fn two_level_spectrum(dim: usize, top_count: usize, top: f64, bottom: f64) -> Vec<f64> {
    (0..dim).map(|i| if i < top_count { top } else { bottom }).collect()
}

/// Named designs used by the experiments.
pub fn design_preset(name: &str, seed: u64) -> Result<GaussianDesign, DesignError> {
    match name {
        "fig1" => GaussianDesign::random_basis(&two_level_spectrum(1000, 50, 1.5, 0.3), seed),
        "isotropic100" => GaussianDesign::isotropic(100),
        other => Err(DesignError::BadTaskSpec(format!("unknown design preset {other:?}"))),
    }
}

/// Which side of a task pair is rescaled in the direction-fixed construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaledSide {
    Source,
    Target,
}

/// How the teacher pair is constructed.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskPairMode {
    /// Independent uniformly random directions.
    Random,
    /// Difference confined to the span of eigenvectors `> k` (tasks agree on
    /// the top-`k` eigenspace).
    TopEigenAlign { k: usize },
    /// Difference confined to the top-`k` eigenspace.
    BottomEigenAlign { k: usize },
    /// `theta_t = alpha * theta_s + noise` with noise of norm about
    /// `noise_ratio * |theta_s|`.
    ScaledAligned { alpha: f64, noise_ratio: f64 },
    /// Unit directions at distance `alignment`; one side is then scaled by `alpha`.
    DirectionFixedScale {
        alpha: f64,
        side: ScaledSide,
        alignment: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPairSpec {
    pub mode: TaskPairMode,
    /// Norm of the source teacher (ignored by `DirectionFixedScale`).
    pub source_norm: f64,
    /// Norm of the target teacher for `Random`, of the difference for the
    /// eigen-aligned modes; ignored otherwise.
    pub diff_norm: f64,
    pub seed: u64,
}

impl TaskPairSpec {
    pub fn new(mode: TaskPairMode, seed: u64) -> Self {
        Self {
            mode,
            source_norm: 1.0,
            diff_norm: 1.0,
            seed,
        }
    }
}

/// Draws a `(source, target)` teacher pair for the given design.
pub fn make_task_pair(spec: &TaskPairSpec, design: &GaussianDesign) -> Result<(TaskVector, TaskVector), DesignError> {
    let d = design.dim();
    let mut r = rng::stream(spec.seed, 0x7A);
    if !(spec.source_norm.is_finite() && spec.source_norm >= 0.0) {
        return Err(DesignError::BadTaskSpec("source_norm must be finite and >= 0".into()));
    }
    let source_dir = rng::unit_vector(&mut r, d);
    let theta_s = &source_dir * spec.source_norm;
    let (s, t) = match &spec.mode {
        TaskPairMode::Random => {
            let t = rng::unit_vector(&mut r, d) * spec.diff_norm;
            (theta_s, t)
        }
        TaskPairMode::TopEigenAlign { k } | TaskPairMode::BottomEigenAlign { k } => {
            if *k > d {
                return Err(DesignError::BadTaskSpec(format!("k = {k} exceeds dimension {d}")));
            }
            let coords = rng::gaussian_vector(&mut r, d);
            let vecs = design.eigen().vectors();
            let (start, len) = match spec.mode {
                TaskPairMode::TopEigenAlign { .. } => (*k, d - *k),
                _ => (0, *k),
            };
            if len == 0 {
                return Err(DesignError::BadTaskSpec("difference subspace is empty".into()));
            }
            let diff = vecs.columns(start, len) * coords.rows(start, len);
            let diff = &diff / diff.norm() * spec.diff_norm;
            let t = &theta_s + diff;
            (theta_s, t)
        }
        TaskPairMode::ScaledAligned { alpha, noise_ratio } => {
            if !alpha.is_finite() || !noise_ratio.is_finite() || *noise_ratio < 0.0 {
                return Err(DesignError::BadTaskSpec("alpha and noise_ratio must be finite, noise_ratio >= 0".into()));
            }
            let noise = rng::gaussian_vector(&mut r, d) * (noise_ratio * spec.source_norm / (d as f64).sqrt());
            let t = &theta_s * *alpha + noise;
            (theta_s, t)
        }
        TaskPairMode::DirectionFixedScale { alpha, side, alignment } => {
            if !(*alpha > 0.0 && alpha.is_finite()) || !(0.0..=2.0).contains(alignment) || d < 2 {
                return Err(DesignError::BadTaskSpec(
                    "alpha must be positive, alignment in [0, 2], dimension >= 2".into(),
                ));
            }
            let mut u = rng::gaussian_vector(&mut r, d);
            u -= &source_dir * source_dir.dot(&u);
            let u = &u / u.norm();
            let angle = 2.0 * (alignment / 2.0).asin();
            let target_dir = &source_dir * angle.cos() + u * angle.sin();
            match side {
                ScaledSide::Source => (source_dir * *alpha, target_dir),
                ScaledSide::Target => (source_dir, target_dir * *alpha),
            }
        }
    };
    Ok((TaskVector::new(s)?, TaskVector::new(t)?))
}

/// `n x d` matrix of rows drawn uniformly from the unit sphere.
pub fn sample_unit_sphere(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, 0x05);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let v = rng::unit_vector(&mut r, d);
        x.row_mut(i).copy_from(&v.transpose());
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn isotropic_sample_covariance_approaches_identity() {
        let design = GaussianDesign::isotropic(5).unwrap();
        let x = design.sample(20_000, 1);
        let c = x.tr_mul(&x) / 20_000.0;
        assert!((c - DMatrix::identity(5, 5)).amax() < 0.05);
    }

    #[test]
    fn random_basis_is_orthonormal_and_reconstructs() {
        let spec = two_level_spectrum(12, 3, 2.0, 0.5);
        let design = GaussianDesign::random_basis(&spec, 9).unwrap();
        let v = design.eigen().vectors();
        assert_relative_eq!(v.tr_mul(v), DMatrix::identity(12, 12), epsilon = 1e-12);
        let c = design.covariance();
        assert_relative_eq!(c.trace(), 3.0 * 2.0 + 9.0 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_spectrum_gives_zero_samples() {
        let design = GaussianDesign::axis_aligned(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(design.sample(4, 2), DMatrix::zeros(4, 3));
    }

    #[test]
    fn invalid_spectra_rejected() {
        assert!(matches!(GaussianDesign::axis_aligned(&[1.0, -0.1]), Err(DesignError::NegativeEigenvalue { .. })));
        assert!(matches!(GaussianDesign::axis_aligned(&[1.0, 2.0]), Err(DesignError::NotDescending { .. })));
        assert!(matches!(GaussianDesign::axis_aligned(&[]), Err(DesignError::EmptySpectrum)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let design = GaussianDesign::random_basis(&two_level_spectrum(6, 2, 3.0, 1.0), 4).unwrap();
        assert_eq!(design.sample(3, 8), design.sample(3, 8));
        assert_ne!(design.sample(3, 8), design.sample(3, 9));
    }

    #[test]
    fn scaled_aligned_without_noise_is_exact_multiple() {
        let design = GaussianDesign::isotropic(8).unwrap();
        let spec = TaskPairSpec::new(TaskPairMode::ScaledAligned { alpha: 1.0, noise_ratio: 0.0 }, 3);
        let (s, t) = make_task_pair(&spec, &design).unwrap();
        assert_eq!(s, t);
        let spec = TaskPairSpec::new(TaskPairMode::ScaledAligned { alpha: 3.0, noise_ratio: 0.0 }, 3);
        let (s, t) = make_task_pair(&spec, &design).unwrap();
        assert_relative_eq!(t.as_vector().clone(), s.as_vector() * 3.0, epsilon = 1e-15);
    }

    #[test]
    fn eigen_aligned_differences_live_in_requested_span() {
        let design = GaussianDesign::random_basis(&two_level_spectrum(20, 4, 3.0, 1.0), 5).unwrap();
        let e = design.eigen();
        for (mode, top_expected) in [
            (TaskPairMode::BottomEigenAlign { k: 4 }, true),
            (TaskPairMode::TopEigenAlign { k: 4 }, false),
        ] {
            let spec = TaskPairSpec { diff_norm: 0.7, ..TaskPairSpec::new(mode, 12) };
            let (s, t) = make_task_pair(&spec, &design).unwrap();
            let diff = t.as_vector() - s.as_vector();
            assert_relative_eq!(diff.norm(), 0.7, epsilon = 1e-12);
            let (top, bottom) = crate::linalg::split_energy(e, 4, &diff).unwrap();
            if top_expected {
                assert!(bottom < 1e-20);
            } else {
                assert!(top < 1e-20);
            }
        }
    }

    #[test]
    fn direction_fixed_scale_geometry() {
        let design = GaussianDesign::isotropic(10).unwrap();
        for side in [ScaledSide::Source, ScaledSide::Target] {
            let mode = TaskPairMode::DirectionFixedScale { alpha: 4.0, side, alignment: 0.1 };
            let (s, t) = make_task_pair(&TaskPairSpec::new(mode, 2), &design).unwrap();
            let (ns, nt) = (s.norm(), t.norm());
            let expected = if side == ScaledSide::Source { (4.0, 1.0) } else { (1.0, 4.0) };
            assert_relative_eq!(ns, expected.0, epsilon = 1e-12);
            assert_relative_eq!(nt, expected.1, epsilon = 1e-12);
            let gap = (s.as_vector() / ns - t.as_vector() / nt).norm();
            assert_relative_eq!(gap, 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_sphere_rows() {
        let x = sample_unit_sphere(7, 4, 1);
        for i in 0..7 {
            assert_relative_eq!(x.row(i).norm(), 1.0, epsilon = 1e-14);
        }
    }
}
