//! Small dense linear-algebra helpers shared by the estimators and diagnostics.

use nalgebra::{Cholesky, ColPivQR, DMatrix, DVector, Dyn, SymmetricEigen, SVD};

use crate::error::{OpeError, Result};

/// Condition numbers above this are treated as singular when no ridge is used.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Power-iteration settings for spectral radius estimates.
pub const POWER_ITERATIONS: usize = 500;
pub const POWER_TOLERANCE: f64 = 1e-10;

/// Factorization of a symmetric Gram matrix, chosen by whether a ridge term is present.
#[derive(Clone, Debug)]
pub enum GramSolver {
    Cholesky(Cholesky<f64, Dyn>),
    PivotedQr { qr: ColPivQR<f64, Dyn, Dyn>, condition: f64 },
}

impl GramSolver {
    /// Factor `sigma`. With `lambda > 0` the matrix must be positive definite;
    /// otherwise its condition number is checked against [`CONDITION_LIMIT`].
    pub fn factor(sigma: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() {
            return Err(OpeError::DimensionMismatch {
                what: "gram matrix columns",
                expected: sigma.nrows(),
                found: sigma.ncols(),
            });
        }
        if lambda > 0.0 {
            return match Cholesky::new(sigma.clone()) {
                Some(chol) => Ok(GramSolver::Cholesky(chol)),
                None => Err(OpeError::SingularCovariance {
                    condition: symmetric_condition(sigma),
                }),
            };
        }
        let condition = symmetric_condition(sigma);
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(OpeError::SingularCovariance { condition });
        }
        Ok(GramSolver::PivotedQr {
            qr: ColPivQR::new(sigma.clone()),
            condition,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            GramSolver::Cholesky(c) => c.l_dirty().nrows(),
            GramSolver::PivotedQr { qr, .. } => qr.p().len(),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            GramSolver::Cholesky(c) => c.solve(b),
            GramSolver::PivotedQr { qr, .. } => qr
                .solve(b)
                .expect("pivoted QR solve after condition check"),
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            GramSolver::Cholesky(c) => c.solve(b),
            GramSolver::PivotedQr { qr, .. } => qr
                .solve(b)
                .expect("pivoted QR solve after condition check"),
        }
    }

    /// `x^T A^{-1} x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.solve_vec(x))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.solve_mat(&DMatrix::identity(n, n))
    }
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix (infinite when singular).
pub fn symmetric_condition(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Spectral radius estimate of a square matrix.
///
/// Runs power iteration from the all-ones vector. If the Rayleigh-type growth
/// ratio has not settled within [`POWER_ITERATIONS`] steps (complex or tied
/// dominant eigenvalues), falls back to the moduli of the Schur eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = f64::NAN;
    for _ in 0..POWER_ITERATIONS {
        let y = m * &x;
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        if (norm - estimate).abs() <= POWER_TOLERANCE * norm.max(1.0) {
            return norm;
        }
        estimate = norm;
        x = y / norm;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Symmetric eigendecomposition with a verified reconstruction, trying looser
/// convergence thresholds when the default one stops early.
fn symmetric_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * a.nrows().max(1) as f64;
    let mut best: Option<(f64, SymmetricEigen<f64, Dyn>)> = None;
    for eps in [f64::EPSILON, 1e-14, 1e-13, 1e-12] {
        let Some(eig) = SymmetricEigen::try_new(a.clone(), eps, 0) else {
            continue;
        };
        let err = (eig.recompose() - a).amax();
        if err <= tol {
            return eig;
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, eig));
        }
    }
    best.map(|(_, eig)| eig).unwrap_or_else(|| SymmetricEigen::new(a.clone()))
}

/// Eigendecomposition of a symmetric PSD matrix with small negative eigenvalues clamped to 0.
///
/// Eigenvalues below `-1e-12 * max(1, ||A||)` are rejected.
pub fn psd_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, Dyn>> {
    let mut eig = symmetric_eigen(&symmetrize(a));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-12 * scale {
                return Err(OpeError::InvalidInput(format!(
                    "matrix is not positive semidefinite (eigenvalue {v:e})"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn rebuild(eig: &SymmetricEigen<f64, Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let vals = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn pinv_cutoff(eig: &SymmetricEigen<f64, Dyn>) -> f64 {
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max * 1e-12 * eig.eigenvalues.len().max(1) as f64
}

/// Principal square root of a PSD matrix.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(a)?;
    Ok(rebuild(&eig, f64::sqrt))
}

/// Pseudo-inverse square root of a PSD matrix (zero on the null space).
pub fn psd_inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(a)?;
    let cut = pinv_cutoff(&eig);
    Ok(rebuild(&eig, |v| if v > cut { 1.0 / v.sqrt() } else { 0.0 }))
}

/// Pseudo-inverse of a PSD matrix.
pub fn psd_pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(a)?;
    let cut = pinv_cutoff(&eig);
    Ok(rebuild(&eig, |v| if v > cut { 1.0 / v } else { 0.0 }))
}

/// True when the PSD matrix has an eigenvalue at or below the pseudo-inverse cutoff.
pub fn psd_is_singular(a: &DMatrix<f64>) -> Result<bool> {
    let eig = psd_eigen(a)?;
    let cut = pinv_cutoff(&eig);
    Ok(eig.eigenvalues.iter().any(|&v| v <= cut))
}

/// Singular value decomposition with a verified reconstruction.
///
/// The default convergence threshold of the bidiagonal iteration can stop early
/// on exactly rank-deficient inputs and return factors that do not reproduce the
/// matrix. Looser thresholds are tried in turn and the first decomposition whose
/// reconstruction error is at rounding level is kept.
pub fn svd(a: &DMatrix<f64>) -> SVD<f64, Dyn, Dyn> {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * (a.nrows() + a.ncols()) as f64;
    let mut best: Option<(f64, SVD<f64, Dyn, Dyn>)> = None;
    for eps in [1e-14, 1e-13, 1e-12, 1e-11] {
        let Some(dec) = a.clone().try_svd(true, true, eps, 0) else {
            continue;
        };
        let err = match dec.clone().recompose() {
            Ok(back) => (back - a).amax(),
            Err(_) => f64::INFINITY,
        };
        if err <= tol {
            return dec;
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, dec));
        }
    }
    best.map(|(_, dec)| dec).unwrap_or_else(|| a.clone().svd(true, true))
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    svd(a).singular_values.iter().cloned().fold(0.0, f64::max)
}

/// Moore-Penrose pseudo-inverse of a general matrix.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let dec = svd(a);
    let max = dec.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = max * 1e-12 * a.nrows().max(a.ncols()).max(1) as f64;
    dec.pseudo_inverse(eps)
        .expect("SVD computed with both factors")
}

/// Numerical rank via SVD with a relative cutoff.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = svd(a).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let eps = max * 1e-10 * a.nrows().max(a.ncols()) as f64;
    sv.iter().filter(|&&v| v > eps).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_reconstructs_rank_deficient_input() {
        let a = DMatrix::from_row_slice(8, 4, &[
            -0.4544299614659973, -0.7134866691459066, -0.11874559269703568, -0.19752858255873973,
            -0.05007594958896582, 0.1747365094375456, -0.06959666748366397, -0.007638807923566918,
            -0.13685895049145214, -0.5655314899405283, 0.3334801691846719, -0.15179951754189402,
            0.7694237529041735, -0.5978867985056063, -0.22476313007157922, 0.4409026589699816,
            0.260168698295044, -0.10905072810740435, 0.5537019967528939, -0.008341150040701462,
            -0.08667999990765124, 0.4569401252041136, -0.1566409001589654, -0.004179774914084271,
            0.14766523229255607, 0.057109028561295606, 0.5828646005658477, -0.07188353399518388,
            0.4094538500545766, 0.46371094555317355, 0.20757881272941647, 0.15283222184493417,
        ]);
        let back = svd(&a).recompose().unwrap();
        assert!((back - &a).amax() < 1e-12);
        let p = pinv(&a);
        assert!((&a * &p * &a - &a).amax() < 1e-12);
        assert_eq!(rank(&a), 3);
    }

    #[test]
    fn cholesky_and_qr_agree_on_spd() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x1 = GramSolver::factor(&a, 1.0).unwrap().solve_vec(&b);
        let x2 = GramSolver::factor(&a, 0.0).unwrap().solve_vec(&b);
        assert!((&x1 - &x2).amax() < 1e-12);
        assert!((&a * &x1 - &b).amax() < 1e-12);
    }

    #[test]
    fn singular_gram_rejected_without_ridge() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match GramSolver::factor(&a, 0.0) {
            Err(OpeError::SingularCovariance { condition }) => assert!(condition > CONDITION_LIMIT),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spectral_radius_of_rotation_uses_fallback() {
        // Rotation by 90 degrees scaled by 0.5: eigenvalues +-0.5i.
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&m) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -0.9, 0.1]));
        assert!((spectral_radius(&m) - 0.9).abs() < 1e-9);
    }

    #[test]
    fn psd_roots_invert_each_other() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&a).unwrap();
        let ri = psd_inv_sqrt(&a).unwrap();
        assert!((&r * &r - &a).amax() < 1e-12);
        assert!((&r * &ri - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn pseudo_inverse_of_rank_one() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(psd_is_singular(&a).unwrap());
        let p = psd_pinv(&a).unwrap();
        assert!((p - &a).amax() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(psd_eigen(&a).is_err());
    }
}
