//! Dense linear-algebra building blocks shared by every model.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; data matrices store one sample per
//! row. Entry points reject non-finite input.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Relative singular-value threshold below which a data matrix counts as
/// rank deficient.
pub const RANK_REL_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-9;
const EIGEN_MAX_ITERS: usize = 10_000;
const ROOT_MAX_ITERS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{what} contains a non-finite entry")]
    NonFinite { what: &'static str },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("eigendecomposition did not converge")]
    NoConvergence,
    #[error("eigenvalue {value:e} of a covariance matrix is negative beyond tolerance")]
    NegativeEigenvalue { value: f64 },
    #[error("data matrix has rank {rank} but {rows} rows")]
    RankDeficient { rank: usize, rows: usize },
    #[error("empty input: {what}")]
    Empty { what: &'static str },
    #[error("index k = {k} outside 0..={dim}")]
    BadIndex { k: usize, dim: usize },
    #[error("no sign change on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

pub fn check_finite_matrix(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite { what })
    }
}

pub fn check_finite_vector(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite { what })
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let scale = m.amax().max(1.0);
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(LinalgError::NotSymmetric { asymmetry: worst });
    }
    Ok(())
}

/// Orthonormal eigenvectors (columns) with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl EigenDecomp {
    /// Builds a decomposition from parts, sorting the pairs by descending value.
    pub fn from_parts(vectors: DMatrix<f64>, values: DVector<f64>) -> Result<Self> {
        if vectors.ncols() != values.len() {
            return Err(LinalgError::DimensionMismatch {
                what: "eigenvector count",
                expected: values.len(),
                got: vectors.ncols(),
            });
        }
        check_finite_matrix(&vectors, "eigenvectors")?;
        check_finite_vector(&values, "eigenvalues")?;
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let sorted_values = DVector::from_iterator(values.len(), order.iter().map(|&i| values[i]));
        let sorted_vectors = DMatrix::from_columns(
            &order
                .iter()
                .map(|&i| vectors.column(i).into_owned())
                .collect::<Vec<_>>(),
        );
        Ok(Self {
            vectors: sorted_vectors,
            values: sorted_values,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    /// First `k` eigenvectors as a `dim x k` matrix.
    pub fn top_vectors(&self, k: usize) -> DMatrix<f64> {
        self.vectors.columns(0, k).into_owned()
    }

    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(&self.values);
        &scaled * self.vectors.transpose()
    }

    /// `V diag(sqrt(values)) V^T` applied to `v`, i.e. the symmetric square root.
    pub fn sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let coords = self.vectors.tr_mul(v);
        let scaled = coords.zip_map(&self.values, |c, l| c * l.max(0.0).sqrt());
        &self.vectors * scaled
    }

    /// `v^T M v` computed in the eigenbasis.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        let coords = self.vectors.tr_mul(v);
        coords
            .iter()
            .zip(self.values.iter())
            .map(|(c, l)| l * c * c)
            .sum()
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn eig_sym(m: &DMatrix<f64>) -> Result<EigenDecomp> {
    check_finite_matrix(m, "matrix")?;
    check_symmetric(m)?;
    if m.nrows() == 0 {
        return Err(LinalgError::Empty { what: "matrix" });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, EIGEN_MAX_ITERS)
        .ok_or(LinalgError::NoConvergence)?;
    EigenDecomp::from_parts(eig.eigenvectors, eig.eigenvalues)
}

/// Eigendecomposition of a covariance matrix: small negative eigenvalues
/// caused by rounding are clamped to zero, larger ones are an error.
pub fn eig_covariance(m: &DMatrix<f64>) -> Result<EigenDecomp> {
    let mut e = eig_sym(m)?;
    let scale = e.values.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
    let tol = 1e-10 * scale;
    for v in e.values.iter_mut() {
        if *v < -tol {
            return Err(LinalgError::NegativeEigenvalue { value: *v });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(e)
}

/// Sorted (descending) eigenvalues only.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_finite_matrix(m, "matrix")?;
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let mut vals: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(DVector::from_vec(vals))
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> Result<f64> {
    let vals = sym_eigenvalues(m)?;
    Ok(vals.iter().fold(0.0_f64, |a, v| a.max(v.abs())))
}

/// Orthogonal projectors onto the row space of a data matrix and its
/// complement, stored as an orthonormal basis of the row space.
#[derive(Debug, Clone)]
pub struct ProjectorPair {
    basis: DMatrix<f64>,
}

impl ProjectorPair {
    /// Wraps a `d x r` matrix with orthonormal columns.
    pub fn from_orthonormal_basis(basis: DMatrix<f64>) -> Self {
        Self { basis }
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// `d x r` orthonormal basis of the row space.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn parallel(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * self.basis.tr_mul(v)
    }

    pub fn perp(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.parallel(v)
    }

    pub fn parallel_matrix(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    pub fn perp_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - self.parallel_matrix()
    }

    /// `P_perp M` for a `d x k` matrix.
    pub fn perp_apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m - &self.basis * self.basis.tr_mul(m)
    }
}

/// Projectors onto span of the rows of `x` (n x d, n <= d) and its complement.
///
/// Uses a thin QR of `x^T`; rank is read from the singular values of the
/// triangular factor, which coincide with those of `x`.
pub fn projectors_from_rows(x: &DMatrix<f64>) -> Result<ProjectorPair> {
    check_finite_matrix(x, "data matrix")?;
    let (n, d) = x.shape();
    if n == 0 {
        return Err(LinalgError::Empty { what: "data matrix" });
    }
    if n > d {
        return Err(LinalgError::RankDeficient { rank: d, rows: n });
    }
    let qr = x.transpose().qr();
    let r = qr.r();
    let sv = r.singular_values();
    let top = sv.iter().fold(0.0_f64, |a, v| a.max(*v));
    let rank = sv.iter().filter(|s| **s > RANK_REL_TOL * top).count();
    if top == 0.0 || rank < n {
        return Err(LinalgError::RankDeficient { rank, rows: n });
    }
    Ok(ProjectorPair {
        basis: qr.q().columns(0, n).into_owned(),
    })
}

/// Projectors onto the span of the top-`k` eigenvectors and its complement.
pub fn top_bottom_projectors(e: &EigenDecomp, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = e.dim();
    if k > d {
        return Err(LinalgError::BadIndex { k, dim: d });
    }
    let vk = e.top_vectors(k);
    let top = &vk * vk.transpose();
    let bottom = DMatrix::identity(d, d) - &top;
    Ok((top, bottom))
}

/// Squared norms of the components of `v` inside and outside the top-`k`
/// eigenspace, computed without forming projector matrices.
pub fn split_energy(e: &EigenDecomp, k: usize, v: &DVector<f64>) -> Result<(f64, f64)> {
    let d = e.dim();
    if k > d {
        return Err(LinalgError::BadIndex { k, dim: d });
    }
    let coords = e.vectors().tr_mul(v);
    let top: f64 = coords.rows(0, k).norm_squared();
    let total = v.norm_squared();
    Ok((top, (total - top).max(0.0)))
}

/// `(1/n) x^T x` (uncentered second-moment matrix).
pub fn empirical_covariance(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite_matrix(x, "data matrix")?;
    let n = x.nrows();
    if n == 0 {
        return Err(LinalgError::Empty { what: "data matrix" });
    }
    Ok(x.tr_mul(x) / n as f64)
}

/// Bisection root finder on `[lo, hi]`.
///
/// Returns a point `r` with `|f(r)| <= tol` or a bracket narrower than `tol`.
pub fn find_positive_root<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    let mut flo = f(lo);
    let fhi = f(hi);
    if !flo.is_finite() || !fhi.is_finite() || flo * fhi > 0.0 {
        return Err(LinalgError::NoSignChange { lo, hi });
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..ROOT_MAX_ITERS {
        mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= tol || (hi - lo) <= tol {
            return Ok(mid);
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Spectral norm of `sigma - x^T x / n` where `sigma` is given by its
/// eigendecomposition.
///
/// When the spectrum of `sigma` ends in a long plateau, `sigma` equals the
/// plateau value times the identity plus a low-rank term, so the difference
/// is a shifted low-rank matrix living in the span of the leading
/// eigenvectors and the sample rows. That span is small compared to `d` for
/// the designs used here, which avoids a full `d x d` eigensolve.
pub fn covariance_gap_norm(e: &EigenDecomp, x: &DMatrix<f64>) -> Result<f64> {
    check_finite_matrix(x, "data matrix")?;
    let (n, d) = x.shape();
    if d != e.dim() {
        return Err(LinalgError::DimensionMismatch {
            what: "data columns vs covariance dimension",
            expected: e.dim(),
            got: d,
        });
    }
    if n == 0 {
        return Err(LinalgError::Empty { what: "data matrix" });
    }
    let vals = e.values();
    let tail = vals[d - 1];
    let plateau_tol = 1e-12 * vals.amax().max(1.0);
    let k = (0..d)
        .rev()
        .find(|&i| (vals[i] - tail).abs() > plateau_tol)
        .map_or(0, |i| i + 1);

    if k + n >= d {
        let diff = e.reconstruct() - x.tr_mul(x) / n as f64;
        return spectral_norm_sym(&diff);
    }

    // Orthonormal basis of span([V_k, x^T]).
    let mut span = DMatrix::zeros(d, k + n);
    span.columns_mut(0, k).copy_from(&e.top_vectors(k));
    span.columns_mut(k, n).copy_from(&x.transpose());
    let qr = span.qr();
    let q_full = qr.q();
    let r = qr.r();
    let rdiag_max = r.diagonal().amax();
    let keep: Vec<usize> = (0..k + n)
        .filter(|&i| r[(i, i)].abs() > 1e-12 * rdiag_max.max(f64::MIN_POSITIVE))
        .collect();
    let q = DMatrix::from_columns(&keep.iter().map(|&i| q_full.column(i).into_owned()).collect::<Vec<_>>());

    // Low-rank part B = V_k (Lambda_k - tail) V_k^T - x^T x / n, projected on q.
    let qv = q.tr_mul(&e.top_vectors(k));
    let lam = DVector::from_iterator(k, (0..k).map(|i| vals[i] - tail));
    let qx = q.tr_mul(&x.transpose());
    let small = &qv * DMatrix::from_diagonal(&lam) * qv.transpose() - &qx * qx.transpose() / n as f64;
    let small = (&small + small.transpose()) * 0.5;
    let shifted = sym_eigenvalues(&small)?.map(|v| v + tail);
    let mut norm = shifted.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if q.ncols() < d {
        norm = norm.max(tail.abs());
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn pseudo_random(n: usize, d: usize, salt: u64) -> DMatrix<f64> {
        let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DMatrix::from_fn(n, d, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn eig_sym_sorts_descending_and_reconstructs() {
        let m = dmatrix![2.0, 1.0, 0.0; 1.0, 3.0, 0.5; 0.0, 0.5, 1.0];
        let e = eig_sym(&m).unwrap();
        assert!(e.values()[0] >= e.values()[1] && e.values()[1] >= e.values()[2]);
        assert_relative_eq!(e.reconstruct(), m, epsilon = 1e-12);
        let vtv = e.vectors().tr_mul(e.vectors());
        assert_relative_eq!(vtv, DMatrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn eig_sym_rejects_asymmetric_and_nan() {
        let m = dmatrix![1.0, 2.0; 0.0, 1.0];
        assert!(matches!(eig_sym(&m), Err(LinalgError::NotSymmetric { .. })));
        let m = dmatrix![1.0, f64::NAN; f64::NAN, 1.0];
        assert!(matches!(eig_sym(&m), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn covariance_clamps_rounding_negatives() {
        let x = dmatrix![1.0, 1.0, 0.0];
        let c = empirical_covariance(&x).unwrap();
        let e = eig_covariance(&c).unwrap();
        assert!(e.values().iter().all(|v| *v >= 0.0));
        assert_relative_eq!(e.values()[0], 2.0, epsilon = 1e-12);
        let bad = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(matches!(eig_covariance(&bad), Err(LinalgError::NegativeEigenvalue { .. })));
    }

    #[test]
    fn projectors_single_row_example() {
        let x = dmatrix![1.0, 0.0, 0.0];
        let p = projectors_from_rows(&x).unwrap();
        assert_relative_eq!(p.parallel_matrix(), dmatrix![1.0, 0.0, 0.0; 0.0, 0.0, 0.0; 0.0, 0.0, 0.0], epsilon = 1e-15);
        assert_relative_eq!(p.perp_matrix(), dmatrix![0.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0], epsilon = 1e-15);
    }

    #[test]
    fn projectors_match_pseudoinverse_oracle() {
        let x = pseudo_random(4, 9, 3);
        let p = projectors_from_rows(&x).unwrap();
        let xxt = &x * x.transpose();
        let oracle = x.transpose() * xxt.try_inverse().unwrap() * &x;
        assert_relative_eq!(p.parallel_matrix(), oracle, epsilon = 1e-10);
        let pp = p.parallel_matrix();
        assert_relative_eq!(&pp * &pp, pp.clone(), epsilon = 1e-12);
        assert_relative_eq!(pp.clone() + p.perp_matrix(), DMatrix::identity(9, 9), epsilon = 1e-12);
    }

    #[test]
    fn projectors_reject_rank_deficiency() {
        let x = dmatrix![1.0, 2.0, 3.0; 2.0, 4.0, 6.0];
        assert!(matches!(projectors_from_rows(&x), Err(LinalgError::RankDeficient { rank: 1, rows: 2 })));
        let x = pseudo_random(5, 3, 1);
        assert!(matches!(projectors_from_rows(&x), Err(LinalgError::RankDeficient { .. })));
    }

    #[test]
    fn top_bottom_identity_example() {
        let e = eig_sym(&DMatrix::identity(3, 3)).unwrap();
        let (top, bottom) = top_bottom_projectors(&e, 0).unwrap();
        assert_eq!(top, DMatrix::zeros(3, 3));
        assert_relative_eq!(bottom, DMatrix::identity(3, 3));
        let (top, bottom) = top_bottom_projectors(&e, 3).unwrap();
        assert_relative_eq!(top, DMatrix::identity(3, 3), epsilon = 1e-15);
        assert_relative_eq!(bottom, DMatrix::zeros(3, 3), epsilon = 1e-15);
        assert!(top_bottom_projectors(&e, 4).is_err());
    }

    #[test]
    fn root_of_quadratic() {
        let r = find_positive_root(|x| x * x - 4.0, 0.0, 5.0, 1e-12).unwrap();
        assert_relative_eq!(r, 2.0, epsilon = 1e-10);
        assert!(matches!(
            find_positive_root(|x| x * x + 1.0, 0.0, 5.0, 1e-12),
            Err(LinalgError::NoSignChange { .. })
        ));
    }

    #[test]
    fn covariance_gap_matches_dense_oracle() {
        let d = 30;
        let raw = pseudo_random(d, d, 11);
        let q = raw.qr().q();
        let mut vals = vec![0.4; d];
        for v in vals.iter_mut().take(4) {
            *v = 2.5;
        }
        let e = EigenDecomp::from_parts(q, DVector::from_vec(vals)).unwrap();
        for n in [3usize, 10, 26, 40] {
            let x = pseudo_random(n, d, n as u64 + 100) * 2.0;
            let fast = covariance_gap_norm(&e, &x).unwrap();
            let dense = e.reconstruct() - x.tr_mul(&x) / n as f64;
            let oracle = dense.symmetric_eigenvalues().amax();
            assert_relative_eq!(fast, oracle, max_relative = 1e-9);
        }
    }
}
