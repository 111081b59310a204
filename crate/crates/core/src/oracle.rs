//! Slow reference implementations for tests and acceptance checks.
//!
//! Nothing in here calls into the fast paths: systems are assembled densely
//! from scratch and solved with LU, moments are read out of dense
//! covariances, and so on.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::obsdata::ObservationSet;
use crate::smoother::{BlockTridiagonalSystem, SmootherOutput};

/// Largest `t · r` the dense oracles accept.
pub const MAX_DENSE_DIM: usize = 64;

fn guard(dim: usize) -> Result<()> {
    if dim > MAX_DENSE_DIM {
        return Err(Error::InvalidParameter(format!(
            "dense oracle limited to dimension {MAX_DENSE_DIM}, got {dim}"
        )));
    }
    Ok(())
}

fn lu_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))
}

fn extract_blocks(mean: &DVector<f64>, cov: &DMatrix<f64>, t: usize, r: usize) -> SmootherOutput {
    SmootherOutput {
        means: (0..t).map(|k| mean.rows(k * r, r).into_owned()).collect(),
        cov_diag: (0..t)
            .map(|k| cov.view((k * r, k * r), (r, r)).into_owned())
            .collect(),
        cov_superdiag: (0..t.saturating_sub(1))
            .map(|k| cov.view((k * r, (k + 1) * r), (r, r)).into_owned())
            .collect(),
    }
}

/// Dense `(Ψ⁻¹ v, Ψ⁻¹)` for a block-tridiagonal system, returned in the
/// banded layout.
pub fn dense_v_oracle(system: &BlockTridiagonalSystem) -> Result<SmootherOutput> {
    let t = system.diag.len();
    let r = system.diag.first().map_or(0, |d| d.nrows());
    guard(t * r)?;
    let mut psi = DMatrix::zeros(t * r, t * r);
    let mut v = DVector::zeros(t * r);
    for k in 0..t {
        for a in 0..r {
            v[k * r + a] = system.rhs[k][a];
            for b in 0..r {
                psi[(k * r + a, k * r + b)] = system.diag[k][(a, b)];
                if k + 1 < t {
                    psi[(k * r + a, (k + 1) * r + b)] = system.superdiag[k][(a, b)];
                    psi[((k + 1) * r + b, k * r + a)] = system.superdiag[k][(a, b)];
                }
            }
        }
    }
    let cov = lu_inverse(psi, "dense precision")?;
    let mean = &cov * v;
    Ok(extract_blocks(&mean, &cov, t, r))
}

/// Inputs of the dense joint-Gaussian V posterior.
pub struct DenseVProblem<'a> {
    pub obs: &'a ObservationSet,
    pub u_means: &'a DMatrix<f64>,
    pub u_covs: &'a [DMatrix<f64>],
    /// Posterior mean of the transition matrix.
    pub f_mean: &'a DMatrix<f64>,
    /// `E[FᵀF]`.
    pub f_second_moment: &'a DMatrix<f64>,
    pub beta: f64,
    pub prior_mean: &'a DVector<f64>,
    pub prior_cov: &'a DMatrix<f64>,
}

/// Mean and full covariance of `q(V)` by direct dense solve.
///
/// The AR prior is written as `‖D vec(V)‖²` with `D` the stacked
/// `v_τ − F v_τ−1` operator; its expected Gram matrix is `E[D]ᵀE[D]` plus the
/// transition covariance correction on the lagged blocks.
pub fn dense_v_posterior(p: &DenseVProblem<'_>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t = p.obs.n_timesteps();
    let r = p.u_means.ncols();
    guard(t * r)?;
    let dim = t * r;
    let mut precision = DMatrix::zeros(dim, dim);
    let mut info = DVector::zeros(dim);

    for e in p.obs.entries() {
        let u = p.u_means.row(e.row).transpose();
        let second = &u * u.transpose() + &p.u_covs[e.row];
        let base = e.col * r;
        for a in 0..r {
            info[base + a] += p.beta * e.value * u[a];
            for b in 0..r {
                precision[(base + a, base + b)] += p.beta * second[(a, b)];
            }
        }
    }

    let lambda_inv = lu_inverse(p.prior_cov.clone(), "prior covariance")?;
    let prior_info = &lambda_inv * p.prior_mean;
    for a in 0..r {
        info[a] += prior_info[a];
        for b in 0..r {
            precision[(a, b)] += lambda_inv[(a, b)];
        }
    }

    if t > 1 {
        let mut d = DMatrix::zeros((t - 1) * r, dim);
        for tau in 1..t {
            let row0 = (tau - 1) * r;
            for a in 0..r {
                d[(row0 + a, tau * r + a)] = 1.0;
                for b in 0..r {
                    d[(row0 + a, (tau - 1) * r + b)] = -p.f_mean[(a, b)];
                }
            }
        }
        precision += d.transpose() * &d;
        let correction = p.f_second_moment - p.f_mean.transpose() * p.f_mean;
        for tau in 0..t - 1 {
            for a in 0..r {
                for b in 0..r {
                    precision[(tau * r + a, tau * r + b)] += correction[(a, b)];
                }
            }
        }
    }

    let cov = lu_inverse(precision, "dense V precision")?;
    let mean = &cov * info;
    Ok((mean, cov))
}

/// [`dense_v_posterior`] reduced to the banded blocks.
pub fn dense_v_update(p: &DenseVProblem<'_>) -> Result<SmootherOutput> {
    let (mean, cov) = dense_v_posterior(p)?;
    Ok(extract_blocks(
        &mean,
        &cov,
        p.obs.n_timesteps(),
        p.u_means.ncols(),
    ))
}

/// Result of the reference transition-matrix regression.
#[derive(Debug, Clone)]
pub struct RegressionPosterior {
    /// Row `i` is the posterior mean of row `i` of `F`.
    pub mean: DMatrix<f64>,
    /// Per-row covariances.
    pub row_covs: Vec<DMatrix<f64>>,
}

/// Bayesian regression of `v_τ` on `v_τ−1` (unit noise, prior precision
/// `diag(υ)` on every row of `F`), with sufficient statistics read out of a
/// dense joint posterior of `vec(V)` (timestep-major, `t r` entries).
///
/// All `r²` coefficients are solved jointly as one dense system.
pub fn transition_regression(
    v_mean: &DVector<f64>,
    v_cov: &DMatrix<f64>,
    r: usize,
    upsilon: &[f64],
) -> Result<RegressionPosterior> {
    let t = v_mean.len() / r;
    let moment = |x: usize, y: usize| v_mean[x] * v_mean[y] + v_cov[(x, y)];
    let dim = r * r;
    let mut precision = DMatrix::zeros(dim, dim);
    let mut info = DVector::zeros(dim);
    // coefficient index: row i, column j -> i * r + j
    for i in 0..r {
        for j in 0..r {
            precision[(i * r + j, i * r + j)] += upsilon[j];
            for tau in 1..t {
                info[i * r + j] += moment(tau * r + i, (tau - 1) * r + j);
                for k in 0..r {
                    precision[(i * r + j, i * r + k)] +=
                        moment((tau - 1) * r + j, (tau - 1) * r + k);
                }
            }
        }
    }
    let cov = lu_inverse(precision, "transition precision")?;
    let coef = &cov * info;
    Ok(RegressionPosterior {
        mean: DMatrix::from_fn(r, r, |i, j| coef[i * r + j]),
        row_covs: (0..r)
            .map(|i| cov.view((i * r, i * r), (r, r)).into_owned())
            .collect(),
    })
}

/// Fill every missing cell with its column's observed mean, or the global
/// observed mean for columns with no observations.
pub fn mean_impute_baseline(obs: &ObservationSet) -> Result<DMatrix<f64>> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    let (n, t) = (obs.n_locations(), obs.n_timesteps());
    let global = obs.values().sum::<f64>() / obs.len() as f64;
    let mut sums = vec![0.0; t];
    let mut counts = vec![0usize; t];
    for e in obs.entries() {
        sums[e.col] += e.value;
        counts[e.col] += 1;
    }
    let col_mean: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { global })
        .collect();
    let mut out = DMatrix::from_fn(n, t, |_, j| col_mean[j]);
    for e in obs.entries() {
        out[(e.row, e.col)] = e.value;
    }
    Ok(out)
}

fn orthonormal_basis(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if m.ncols() == 0 || m.ncols() > m.nrows() {
        return Err(Error::InvalidParameter(format!(
            "{name} must have 1..=n columns"
        )));
    }
    let qr = m.clone().qr();
    let rmat = qr.r();
    let scale = (0..rmat.ncols())
        .map(|i| rmat[(i, i)].abs())
        .fold(0.0, f64::max);
    if scale == 0.0 || (0..rmat.ncols()).any(|i| rmat[(i, i)].abs() <= 1e-12 * scale) {
        return Err(Error::InvalidParameter(format!("{name} is rank deficient")));
    }
    Ok(qr.q())
}

// nalgebra's default SVD tolerance is unreliable on rank-deficient input
fn descending_singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let svd = m
        .clone()
        .try_svd(false, false, 1e-12, 10_000)
        .ok_or_else(|| Error::Singular("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Canonical angles between the column spans of `a` and `b`, ascending.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension("bases must have equal row counts".into()));
    }
    let qa = orthonormal_basis(a, "first basis")?;
    let qb = orthonormal_basis(b, "second basis")?;
    // make qb the narrower one
    let (qa, qb) = if qb.ncols() <= qa.ncols() {
        (qa, qb)
    } else {
        (qb, qa)
    };
    let cosines = descending_singular_values(&(qa.transpose() * &qb))?;
    let residual = &qb - &qa * (qa.transpose() * &qb);
    let mut sines = descending_singular_values(&residual)?;
    sines.reverse();
    Ok(cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| s.min(1.0).atan2(c.min(1.0)))
        .collect())
}
