//! Small dense helpers shared by the posterior updates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};

use crate::error::{Error, Result};

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
/// The result is symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Inverse of a symmetric positive-semidefinite matrix with its eigenvalues
/// floored at `rel_floor` times the largest. For covariances too
/// ill-conditioned for [`spd_inverse`].
pub fn floored_inverse(m: &DMatrix<f64>, rel_floor: f64, what: &str) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0 && top.is_finite()) {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    let floor = top * rel_floor;
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    let q = &eig.eigenvectors;
    let mut inv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Cholesky factor of a posterior precision. When the first attempt fails,
/// `jitter * trace / r` is added to the diagonal and the factorization is
/// retried once.
pub fn factor_precision(
    precision: &DMatrix<f64>,
    jitter: f64,
    what: &str,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(precision.clone()) {
        return Ok(c);
    }
    let r = precision.nrows().max(1) as f64;
    let bump = (jitter * precision.trace().abs() / r).max(f64::MIN_POSITIVE);
    let mut shifted = precision.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += bump;
    }
    Cholesky::new(shifted).ok_or_else(|| Error::Singular(what.to_string()))
}

/// Covariance and mean of a Gaussian given in information form
/// (`precision`, `precision * mean`).
pub fn gaussian_from_information(
    precision: &DMatrix<f64>,
    information: &DVector<f64>,
    jitter: f64,
    what: &str,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = factor_precision(precision, jitter, what)?;
    let mean = chol.solve(information);
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    Ok((mean, cov))
}

const SVD_TOL: f64 = 1e-12;
const SVD_MAX_ITERS: usize = 10_000;

/// Singular value decomposition with a fixed convergence tolerance. The
/// default tolerance of `DMatrix::svd` returns inaccurate factors on
/// rank-deficient input. Singular values are not sorted.
pub fn svd(m: &DMatrix<f64>, compute_u: bool, compute_v: bool) -> Result<SVD<f64, Dyn, Dyn>> {
    m.clone()
        .try_svd(compute_u, compute_v, SVD_TOL, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Singular("SVD did not converge".into()))
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut s: Vec<f64> = svd(m, false, false)?
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m, "t").unwrap();
        let id = &m * &inv;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn floored_inverse_matches_exact_when_well_conditioned() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let a = floored_inverse(&m, 1e-14, "t").unwrap();
        let b = spd_inverse(&m, "t").unwrap();
        assert!((a - b).norm() < 1e-14);
    }

    #[test]
    fn floored_inverse_of_singular() {
        // rank one: the null direction gets precision 1 / (floor * 2)
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let inv = floored_inverse(&m, 1e-10, "t").unwrap();
        let along = DVector::from_vec(vec![1.0, 1.0]) / 2f64.sqrt();
        let across = DVector::from_vec(vec![1.0, -1.0]) / 2f64.sqrt();
        assert!(((&inv * &along).dot(&along) - 0.5).abs() < 1e-6);
        assert!(((&inv * &across).dot(&across) - 0.5e10).abs() < 1e-6 * 0.5e10);
        assert!(floored_inverse(&DMatrix::zeros(2, 2), 1e-10, "t").is_err());
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            spd_inverse(&m, "t"),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank one, PSD
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(m.clone()).is_none());
        assert!(factor_precision(&m, 1e-10, "t").is_ok());
    }

    #[test]
    fn svd_of_rank_deficient_matrix() {
        // outer products of integer vectors: rank two, 7 x 5
        let a = DMatrix::from_fn(7, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let b = DMatrix::from_fn(2, 5, |i, j| ((i * 2 + j * 3) % 5) as f64 - 2.0);
        for m in [&a * &b, (&a * &b).transpose()] {
            let rec = svd(&m, true, true).unwrap().recompose().unwrap();
            assert!((rec - &m).norm() <= 1e-12 * m.norm());
            let s = singular_values(&m).unwrap();
            assert!(s[0] >= s[1] && s[2] <= 1e-12 * s[0]);
        }
    }

    #[test]
    fn information_form() {
        let p = DMatrix::from_row_slice(1, 1, &[2.0]);
        let h = DVector::from_vec(vec![2.0]);
        let (mean, cov) = gaussian_from_information(&p, &h, 1e-10, "t").unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-15);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-15);
    }
}
