//! Mean and banded covariance of a Gaussian whose precision is symmetric
//! positive-definite block-tridiagonal.
//!
//! Given `Ψ` (diagonal blocks `Ψ_kk`, super-diagonal blocks `Ψ_k,k+1`) and
//! `v`, computes `μ = Ψ⁻¹ v` and the diagonal and super-diagonal blocks of
//! `Ξ = Ψ⁻¹` without forming the dense inverse. The forward pass applies
//! `D⁻¹ L⁻¹` of the block LDLᵀ factorization, the backward pass applies
//! `L⁻ᵀ` in place. Cost is `O(t r³)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetrize};

/// Block-tridiagonal precision `Ψ` with right-hand side `v`, blocks 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonalSystem {
    pub diag: Vec<DMatrix<f64>>,
    pub superdiag: Vec<DMatrix<f64>>,
    pub rhs: Vec<DVector<f64>>,
}

impl BlockTridiagonalSystem {
    pub fn new(
        diag: Vec<DMatrix<f64>>,
        superdiag: Vec<DMatrix<f64>>,
        rhs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let sys = Self {
            diag,
            superdiag,
            rhs,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn t_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |d| d.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.diag.len();
        if t == 0 {
            return Err(Error::Dimension("empty block system".into()));
        }
        if self.superdiag.len() + 1 != t || self.rhs.len() != t {
            return Err(Error::Dimension(format!(
                "{} diagonal, {} super-diagonal, {} rhs blocks",
                t,
                self.superdiag.len(),
                self.rhs.len()
            )));
        }
        let r = self.block_size();
        let square = |m: &DMatrix<f64>| m.shape() == (r, r);
        if !self.diag.iter().all(square)
            || !self.superdiag.iter().all(square)
            || !self.rhs.iter().all(|v| v.len() == r)
        {
            return Err(Error::Dimension(format!("blocks must all be {r}x{r}")));
        }
        Ok(())
    }

    /// Dense `tr × tr` precision.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (t, r) = (self.t_blocks(), self.block_size());
        let mut psi = DMatrix::zeros(t * r, t * r);
        let mut v = DVector::zeros(t * r);
        for k in 0..t {
            psi.view_mut((k * r, k * r), (r, r))
                .copy_from(&self.diag[k]);
            v.rows_mut(k * r, r).copy_from(&self.rhs[k]);
            if k + 1 < t {
                psi.view_mut((k * r, (k + 1) * r), (r, r))
                    .copy_from(&self.superdiag[k]);
                psi.view_mut(((k + 1) * r, k * r), (r, r))
                    .copy_from(&self.superdiag[k].transpose());
            }
        }
        (psi, v)
    }
}

/// Posterior mean and the two needed covariance block families.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    pub means: Vec<DVector<f64>>,
    pub cov_diag: Vec<DMatrix<f64>>,
    pub cov_superdiag: Vec<DMatrix<f64>>,
}

/// Intermediate (hatted) quantities after the forward pass. Has the same
/// layout as [`SmootherOutput`]; [`backward_pass`] overwrites it in place.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState(pub SmootherOutput);

/// Block elimination from the first block to the last.
///
/// `Ξ̂_00 = Ψ_00⁻¹`, `Ξ̂_k,k+1 = Ξ̂_kk Ψ_k,k+1`,
/// `Ξ̂_k+1,k+1 = (Ψ_k+1,k+1 − Ξ̂_k,k+1ᵀ Ψ_k,k+1)⁻¹`,
/// `μ̂_k+1 = Ξ̂_k+1,k+1 (v_k+1 − Ψ_k,k+1ᵀ μ̂_k)`.
pub fn forward_pass(sys: &BlockTridiagonalSystem) -> Result<ForwardState> {
    sys.validate()?;
    let t = sys.t_blocks();
    let mut means = Vec::with_capacity(t);
    let mut cov_diag = Vec::with_capacity(t);
    let mut cov_superdiag = Vec::with_capacity(t - 1);

    let chol = cholesky(&sys.diag[0], "pivot block 0")?;
    let mut xi = chol.inverse();
    symmetrize(&mut xi);
    means.push(chol.solve(&sys.rhs[0]));
    cov_diag.push(xi);

    for k in 0..t - 1 {
        let coupling = &sys.superdiag[k];
        let xi_cross = &cov_diag[k] * coupling;
        let schur = &sys.diag[k + 1] - xi_cross.transpose() * coupling;
        let chol = cholesky(&schur, &format!("pivot block {}", k + 1))?;
        let mut xi_next = chol.inverse();
        symmetrize(&mut xi_next);
        let mean_next = chol.solve(&(&sys.rhs[k + 1] - coupling.transpose() * &means[k]));
        cov_superdiag.push(xi_cross);
        cov_diag.push(xi_next);
        means.push(mean_next);
    }
    Ok(ForwardState(SmootherOutput {
        means,
        cov_diag,
        cov_superdiag,
    }))
}

/// Back-substitution from the last block, in place:
/// `Ξ_k,k+1 = −Ξ̂_k,k+1 Ξ_k+1,k+1`, `Ξ_kk = Ξ̂_kk − Ξ̂_k,k+1 Ξ_k,k+1ᵀ`,
/// `μ_k = μ̂_k − Ξ̂_k,k+1 μ_k+1`.
pub fn backward_pass(state: ForwardState) -> SmootherOutput {
    let mut out = state.0;
    let t = out.means.len();
    for k in (0..t.saturating_sub(1)).rev() {
        let hat_cross = std::mem::replace(&mut out.cov_superdiag[k], DMatrix::zeros(0, 0));
        let cross = -(&hat_cross * &out.cov_diag[k + 1]);
        out.cov_diag[k] -= &hat_cross * cross.transpose();
        symmetrize(&mut out.cov_diag[k]);
        let shift = &hat_cross * &out.means[k + 1];
        out.means[k] -= shift;
        out.cov_superdiag[k] = cross;
    }
    out
}

pub fn smooth(sys: &BlockTridiagonalSystem) -> Result<SmootherOutput> {
    forward_pass(sys).map(backward_pass)
}
