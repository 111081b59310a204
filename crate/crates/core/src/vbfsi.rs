//! Mean-field variational updates for the low-rank model `X ≈ U Vᵀ` with an
//! AR(1) state-space prior on the rows of `V`, ARD precisions on the columns
//! of `U`, and an optional Mahalanobis prior pulling `U` toward the previous
//! day's posterior.
//!
//! Conventions: `U` is `n × r` (row `i` is location `i`), `V` is `t × r`
//! (row `τ` is the latent state at timestep `τ`), and the transition matrix
//! `F` is `r × r` with `v_τ ≈ F v_τ−1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    factor_precision, floored_inverse, gaussian_from_information, spd_inverse, symmetrize,
};
use crate::obsdata::ObservationSet;
use crate::rng::{stream, Stream};
use crate::smoother::{smooth, BlockTridiagonalSystem};

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbConfig {
    pub max_iters: usize,
    pub conv_tol: f64,
    /// Relative diagonal shift applied once when a precision fails Cholesky.
    pub jitter: f64,
    /// Latent dimensions whose ARD precision exceeds this are removed.
    pub rank_prune_threshold: f64,
    /// Upper clamp for β̂, γ̂ and υ̂.
    pub beta_max: f64,
    /// Latent dimensions whose squared mean norm (over `U` and `V`) falls
    /// below this fraction of their posterior variance mass are removed.
    pub prune_relevance: f64,
    pub beta_rule: BetaRule,
    pub init: InitMethod,
    /// Rotate the factors to a balanced basis after every iteration.
    pub rebalance: bool,
}

/// Starting point of the factor means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMethod {
    Random,
    /// Leading singular pairs of the zero-filled, `1/p`-rescaled observations.
    Svd,
}

/// How the noise precision is re-estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaRule {
    /// `|Ω| / ‖Z − P_Ω(μᵁ μⱽᵀ)‖²`.
    PlugIn,
    /// `|Ω| / E‖Z − P_Ω(U Vᵀ)‖²`, including the posterior variance terms.
    Expected,
}

impl Default for VbConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            conv_tol: 1e-5,
            jitter: 1e-10,
            rank_prune_threshold: 1e8,
            beta_max: 1e12,
            prune_relevance: 1e-6,
            beta_rule: BetaRule::Expected,
            init: InitMethod::Svd,
            rebalance: true,
        }
    }
}

impl VbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.conv_tol > 0.0) {
            return Err(Error::InvalidParameter("conv_tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.beta_max > 0.0) || !(self.rank_prune_threshold > 0.0) {
            return Err(Error::InvalidParameter(
                "beta_max and rank_prune_threshold must be positive".into(),
            ));
        }
        if !(self.prune_relevance >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::InvalidParameter(
                "prune_relevance and jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `q(U)`: independent Gaussian rows plus the ARD precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFactorPosterior {
    /// `n × r`, row `i` is `μᵁ_i`.
    pub row_means: DMatrix<f64>,
    pub row_covs: Vec<DMatrix<f64>>,
    pub gamma: DVector<f64>,
}

impl SpatialFactorPosterior {
    pub fn rank(&self) -> usize {
        self.row_means.ncols()
    }

    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.row_means.row(i).transpose()
    }
}

/// `q(V)`: Gaussian over the whole chain, kept as means plus the diagonal
/// and super-diagonal covariance blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFactorPosterior {
    /// `t × r`, row `τ` is `μⱽ_τ`.
    pub means: DMatrix<f64>,
    pub cov_diag: Vec<DMatrix<f64>>,
    /// `cov_superdiag[τ] = Cov(v_τ, v_τ+1)`.
    pub cov_superdiag: Vec<DMatrix<f64>>,
    /// Prior mean `μ₁` of the first state.
    pub prior_mean: DVector<f64>,
    /// Prior covariance `Λ₁` of the first state.
    pub prior_cov: DMatrix<f64>,
}

impl TemporalFactorPosterior {
    pub fn rank(&self) -> usize {
        self.means.ncols()
    }

    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }

    pub fn mean(&self, tau: usize) -> DVector<f64> {
        self.means.row(tau).transpose()
    }

    /// `E[v_τ v_τᵀ]`.
    pub fn second_moment(&self, tau: usize) -> DMatrix<f64> {
        let m = self.mean(tau);
        &m * m.transpose() + &self.cov_diag[tau]
    }
}

/// `q(F)`: independent Gaussian rows plus ARD precisions `υ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPosterior {
    /// Row `i` is `μᶠ_i`, so this is also `E[F]`.
    pub row_means: DMatrix<f64>,
    pub row_covs: Vec<DMatrix<f64>>,
    pub upsilon: DVector<f64>,
    /// `E[FᵀF] = Σ_i μᶠ_i μᶠ_iᵀ + Ξᶠ_i`.
    pub second_moment: DMatrix<f64>,
}

impl TransitionPosterior {
    pub fn rank(&self) -> usize {
        self.row_means.nrows()
    }

    /// Posterior from per-row means and covariances; `E[FᵀF]` is derived.
    pub fn from_rows(
        row_means: DMatrix<f64>,
        row_covs: Vec<DMatrix<f64>>,
        upsilon: DVector<f64>,
    ) -> Self {
        let r = row_means.nrows();
        let mut second_moment = DMatrix::zeros(r, r);
        for (i, cov) in row_covs.iter().enumerate() {
            let m = row_means.row(i).transpose();
            second_moment += &m * m.transpose() + cov;
        }
        symmetrize(&mut second_moment);
        Self {
            row_means,
            row_covs,
            upsilon,
            second_moment,
        }
    }

    /// Zero-mean transition with the given row covariance.
    pub fn prior(upsilon: DVector<f64>) -> Self {
        let r = upsilon.len();
        let cov = DMatrix::from_diagonal(&upsilon.map(|u| 1.0 / u));
        Self::from_rows(DMatrix::zeros(r, r), vec![cov; r], upsilon)
    }
}

/// Relative eigenvalue floor for prior covariances that are numerically
/// singular (a direction whose ARD precision sits at its cap).
const PRIOR_COV_FLOOR: f64 = 1e-14;

/// Gaussian prior on each row of `U` centered at the previous day's
/// posterior mean with that posterior's covariance, weighted by `eta`.
///
/// When the prior rank differs from the current rank, it acts on the shared
/// leading dimensions only (through the marginal of those dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePrior {
    row_means: DMatrix<f64>,
    row_covs: Vec<DMatrix<f64>>,
    row_precisions: Vec<DMatrix<f64>>,
    eta: f64,
}

impl SubspacePrior {
    pub fn new(row_means: DMatrix<f64>, row_covs: Vec<DMatrix<f64>>, eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eta {eta} must be finite and >= 0"
            )));
        }
        let k = row_means.ncols();
        if row_covs.len() != row_means.nrows() || row_covs.iter().any(|c| c.shape() != (k, k)) {
            return Err(Error::Dimension("subspace prior covariances".into()));
        }
        let row_precisions = row_covs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let what = format!("subspace prior covariance of row {i}");
                spd_inverse(c, &what).or_else(|_| floored_inverse(c, PRIOR_COV_FLOOR, &what))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            row_means,
            row_covs,
            row_precisions,
            eta,
        })
    }

    /// A prior that contributes nothing.
    pub fn none(n: usize) -> Self {
        Self {
            row_means: DMatrix::zeros(n, 0),
            row_covs: vec![DMatrix::zeros(0, 0); n],
            row_precisions: vec![DMatrix::zeros(0, 0); n],
            eta: 0.0,
        }
    }

    /// The `U` posterior of a finished day as tomorrow's prior.
    pub fn from_posterior(u: &SpatialFactorPosterior, eta: f64) -> Result<Self> {
        Self::new(u.row_means.clone(), u.row_covs.clone(), eta)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eta {eta} must be finite and >= 0"
            )));
        }
        self.eta = eta;
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.row_means.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.row_means.nrows()
    }

    pub fn row_means(&self) -> &DMatrix<f64> {
        &self.row_means
    }

    pub fn row_covs(&self) -> &[DMatrix<f64>] {
        &self.row_covs
    }

    /// True when the prior adds nothing to the posterior.
    pub fn is_inactive(&self) -> bool {
        self.eta == 0.0 || self.rank() == 0
    }

    /// Marginal prior over a subset of the dimensions (kept in order).
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let row_means = self.row_means.select_columns(keep);
        let row_covs = self
            .row_covs
            .iter()
            .map(|c| c.select_rows(keep).select_columns(keep))
            .collect();
        Self::new(row_means, row_covs, self.eta)
    }

    /// Prior on `Rᵀ u` when the prior is on `u`.
    pub fn rotate(&self, r: &DMatrix<f64>) -> Result<Self> {
        let row_means = &self.row_means * r;
        let row_covs = self
            .row_covs
            .iter()
            .map(|c| {
                let mut m = r.transpose() * c * r;
                symmetrize(&mut m);
                m
            })
            .collect();
        Self::new(row_means, row_covs, self.eta)
    }

    /// `η Ξ⁻¹` and `η Ξ⁻¹ μ` of row `i` over the leading `s` dimensions.
    fn row_information(&self, i: usize, s: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mean = self.row_means.row(i).columns(0, s).transpose();
        let precision = if s == self.rank() {
            self.row_precisions[i].clone()
        } else {
            let cov = self.row_covs[i].view((0, 0), (s, s)).into_owned();
            spd_inverse(&cov, &format!("subspace prior covariance of row {i}"))?
        };
        let info = &precision * mean;
        Ok((precision * self.eta, info * self.eta))
    }
}

/// Hyperparameter point estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub gamma: DVector<f64>,
    pub upsilon: DVector<f64>,
    pub beta: f64,
}

fn clamp_positive(x: f64, max: f64) -> f64 {
    if x.is_finite() && x > 0.0 {
        x.min(max)
    } else {
        max
    }
}

/// `q(U)` given `q(V)`, the subspace prior, `γ̂` and `β̂`.
pub fn update_u(
    obs: &ObservationSet,
    v: &TemporalFactorPosterior,
    prior: &SubspacePrior,
    gamma: &DVector<f64>,
    beta: f64,
    jitter: f64,
) -> Result<SpatialFactorPosterior> {
    let (n, t) = (obs.n_locations(), obs.n_timesteps());
    let r = v.rank();
    if v.len() != t || gamma.len() != r {
        return Err(Error::Dimension(format!(
            "update_u: V is {}x{}, gamma has {} entries, data has t = {}",
            v.len(),
            r,
            gamma.len(),
            t
        )));
    }
    let shared = if prior.is_inactive() {
        0
    } else {
        if prior.n_rows() != n {
            return Err(Error::Dimension(format!(
                "subspace prior has {} rows, data has {}",
                prior.n_rows(),
                n
            )));
        }
        prior.rank().min(r)
    };

    let second: Vec<DMatrix<f64>> = (0..t).map(|tau| v.second_moment(tau)).collect();
    let rows = obs.by_row();
    let mut row_means = DMatrix::zeros(n, r);
    let mut row_covs = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let mut gram = DMatrix::zeros(r, r);
        let mut cross = DVector::zeros(r);
        for &(tau, z) in row {
            gram += &second[tau];
            cross.axpy(z, &v.means.row(tau).transpose(), 1.0);
        }
        let mut precision = DMatrix::from_diagonal(gamma) + gram * beta;
        let mut info = cross * beta;
        if shared > 0 {
            let (p, h) = prior.row_information(i, shared)?;
            let mut block = precision.view_mut((0, 0), (shared, shared));
            block += p;
            let mut head = info.rows_mut(0, shared);
            head += h;
        }
        let (mean, cov) =
            gaussian_from_information(&precision, &info, jitter, &format!("U row {i} precision"))?;
        row_means.set_row(i, &mean.transpose());
        row_covs.push(cov);
    }
    Ok(SpatialFactorPosterior {
        row_means,
        row_covs,
        gamma: gamma.clone(),
    })
}

/// Block-tridiagonal precision and information vector of `q(V)`.
///
/// Diagonal block `τ` is `β̂ Σ_{i:(i,τ)∈Ω} E[u_i u_iᵀ]` plus `Λ₁⁻¹` at `τ = 0`,
/// `I` for `τ > 0`, and `E[FᵀF]` for `τ < t − 1`. Every super-diagonal block
/// is `−E[F]ᵀ`.
pub fn assemble_v_system(
    obs: &ObservationSet,
    u: &SpatialFactorPosterior,
    f: &TransitionPosterior,
    beta: f64,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<BlockTridiagonalSystem> {
    let (n, t) = (obs.n_locations(), obs.n_timesteps());
    let r = u.rank();
    if u.row_means.nrows() != n
        || f.rank() != r
        || prior_mean.len() != r
        || prior_cov.shape() != (r, r)
    {
        return Err(Error::Dimension(
            "assemble_v_system: inconsistent ranks".into(),
        ));
    }
    let identity = DMatrix::<f64>::identity(r, r);
    let second: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let m = u.mean(i);
            &m * m.transpose() + &u.row_covs[i]
        })
        .collect();
    let prior_precision = spd_inverse(prior_cov, "initial state covariance")?;
    let cols = obs.by_col();

    let mut diag = Vec::with_capacity(t);
    let mut rhs = Vec::with_capacity(t);
    for (tau, col) in cols.iter().enumerate() {
        let mut gram = DMatrix::zeros(r, r);
        let mut cross = DVector::zeros(r);
        for &(i, z) in col {
            gram += &second[i];
            cross.axpy(z, &u.row_means.row(i).transpose(), 1.0);
        }
        let mut block = gram * beta;
        let mut info = cross * beta;
        if tau == 0 {
            block += &prior_precision;
            info += &prior_precision * prior_mean;
        } else {
            block += &identity;
        }
        if tau + 1 < t {
            block += &f.second_moment;
        }
        symmetrize(&mut block);
        diag.push(block);
        rhs.push(info);
    }
    let coupling = -f.row_means.transpose();
    let superdiag = vec![coupling; t.saturating_sub(1)];
    BlockTridiagonalSystem::new(diag, superdiag, rhs)
}

/// `q(V)` by assembling the chain precision and running the block smoother.
pub fn update_v(
    obs: &ObservationSet,
    u: &SpatialFactorPosterior,
    f: &TransitionPosterior,
    beta: f64,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<TemporalFactorPosterior> {
    let sys = assemble_v_system(obs, u, f, beta, prior_mean, prior_cov)?;
    let out = smooth(&sys)?;
    let t = out.means.len();
    let r = u.rank();
    let means = DMatrix::from_fn(t, r, |tau, k| out.means[tau][k]);
    Ok(TemporalFactorPosterior {
        means,
        cov_diag: out.cov_diag,
        cov_superdiag: out.cov_superdiag,
        prior_mean: prior_mean.clone(),
        prior_cov: prior_cov.clone(),
    })
}

/// `q(F)`: Bayesian regression of `v_τ` on `v_τ−1` using expected moments,
/// unit noise precision and prior precision `diag(υ̂)`. All rows share one
/// posterior covariance.
pub fn update_f(
    v: &TemporalFactorPosterior,
    upsilon: &DVector<f64>,
    jitter: f64,
) -> Result<TransitionPosterior> {
    let (t, r) = (v.len(), v.rank());
    if upsilon.len() != r {
        return Err(Error::Dimension("update_f: upsilon length".into()));
    }
    if t < 2 {
        return Ok(TransitionPosterior::prior(upsilon.clone()));
    }
    let mut lagged = DMatrix::zeros(r, r);
    let mut cross = DMatrix::zeros(r, r);
    for tau in 1..t {
        let prev = v.mean(tau - 1);
        lagged += &prev * prev.transpose() + &v.cov_diag[tau - 1];
        cross += v.mean(tau) * prev.transpose() + v.cov_superdiag[tau - 1].transpose();
    }
    let precision = DMatrix::from_diagonal(upsilon) + lagged;
    let chol = factor_precision(&precision, jitter, "transition precision")?;
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    // row i of E[F] solves precision · m = cross_iᵀ
    let row_means = chol.solve(&cross.transpose()).transpose();
    Ok(TransitionPosterior::from_rows(
        row_means,
        vec![cov; r],
        upsilon.clone(),
    ))
}

/// `υ̂_i = r / Σ_k ([μᶠ_k]_i² + [Ξᶠ_k]_ii)`.
pub fn update_upsilon(f: &TransitionPosterior, max: f64) -> DVector<f64> {
    let r = f.rank();
    DVector::from_fn(r, |i, _| {
        let denom: f64 = (0..r)
            .map(|k| f.row_means[(k, i)].powi(2) + f.row_covs[k][(i, i)])
            .sum();
        clamp_positive(r as f64 / denom, max)
    })
}

/// `γ̂_i = (n + t) / (Σ_k [μᵁ_k]_i² + [Ξᵁ_k]_ii + Σ_k [μⱽ_k]_i² + [Ξⱽ_kk]_ii)`.
pub fn update_gamma(
    u: &SpatialFactorPosterior,
    v: &TemporalFactorPosterior,
    max: f64,
) -> DVector<f64> {
    let (n, t, r) = (u.row_means.nrows(), v.len(), u.rank());
    DVector::from_fn(r, |i, _| {
        let u_energy: f64 = (0..n)
            .map(|k| u.row_means[(k, i)].powi(2) + u.row_covs[k][(i, i)])
            .sum();
        let v_energy: f64 = (0..t)
            .map(|k| v.means[(k, i)].powi(2) + v.cov_diag[k][(i, i)])
            .sum();
        clamp_positive((n + t) as f64 / (u_energy + v_energy), max)
    })
}

/// `‖Z − P_Ω(μᵁ μⱽᵀ)‖²_F`.
pub fn residual_sq(
    obs: &ObservationSet,
    u: &SpatialFactorPosterior,
    v: &TemporalFactorPosterior,
) -> f64 {
    obs.entries()
        .iter()
        .map(|e| {
            let fit = u.row_means.row(e.row).dot(&v.means.row(e.col));
            (e.value - fit).powi(2)
        })
        .sum()
}

/// `E‖Z − P_Ω(U Vᵀ)‖²_F` under the factorized posterior.
pub fn expected_residual_sq(
    obs: &ObservationSet,
    u: &SpatialFactorPosterior,
    v: &TemporalFactorPosterior,
) -> f64 {
    obs.entries()
        .iter()
        .map(|e| {
            let mu = u.mean(e.row);
            let mv = v.mean(e.col);
            let (cu, cv) = (&u.row_covs[e.row], &v.cov_diag[e.col]);
            let fit = mu.dot(&mv);
            (e.value - fit).powi(2)
                + (cv * &mu).dot(&mu)
                + (cu * &mv).dot(&mv)
                + cu.component_mul(cv).sum()
        })
        .sum()
}

/// `β̂ = |Ω| / residual` under `rule`, clamped at `max`.
pub fn update_beta(
    obs: &ObservationSet,
    u: &SpatialFactorPosterior,
    v: &TemporalFactorPosterior,
    rule: BetaRule,
    max: f64,
) -> f64 {
    let residual = match rule {
        BetaRule::PlugIn => residual_sq(obs, u, v),
        BetaRule::Expected => expected_residual_sq(obs, u, v),
    };
    clamp_positive(obs.len() as f64 / residual, max)
}

/// All three hyperparameter updates.
pub fn update_hyperparams(
    obs: &ObservationSet,
    factors: &Factors,
    rule: BetaRule,
    max: f64,
) -> Hyperparams {
    Hyperparams {
        gamma: update_gamma(&factors.u, &factors.v, max),
        upsilon: update_upsilon(&factors.f, max),
        beta: update_beta(obs, &factors.u, &factors.v, rule, max),
    }
}

/// Indices of the latent dimensions that survive pruning: those with
/// `γ̂_i ≤ threshold`, or the single smallest `γ̂` if none do.
pub fn surviving_dims(gamma: &DVector<f64>, threshold: f64) -> Vec<usize> {
    let keep: Vec<usize> = (0..gamma.len())
        .filter(|&i| gamma[i] <= threshold)
        .collect();
    if keep.is_empty() && !gamma.is_empty() {
        let best = (0..gamma.len())
            .min_by(|&a, &b| gamma[a].total_cmp(&gamma[b]))
            .unwrap();
        vec![best]
    } else {
        keep
    }
}

/// The posterior triple restricted to a subset of latent dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub u: SpatialFactorPosterior,
    pub v: TemporalFactorPosterior,
    pub f: TransitionPosterior,
}

impl Factors {
    pub fn rank(&self) -> usize {
        self.u.rank()
    }

    /// `μᵁ μⱽᵀ`.
    pub fn estimate(&self) -> DMatrix<f64> {
        &self.u.row_means * self.v.means.transpose()
    }

    /// `E[UᵀU]` and `E[VᵀV]`.
    pub fn gram_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut gu = self.u.row_means.transpose() * &self.u.row_means;
        for c in &self.u.row_covs {
            gu += c;
        }
        let mut gv = self.v.means.transpose() * &self.v.means;
        for c in &self.v.cov_diag {
            gv += c;
        }
        (gu, gv)
    }

    /// Reparametrize by `U ↦ U R`, `V ↦ V R⁻ᵀ`, leaving `μᵁ μⱽᵀ` unchanged.
    /// The transition posterior is left untouched; callers refresh it.
    pub fn rotate(&self, r: &DMatrix<f64>) -> Result<Self> {
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("rotation".into()))?;
        let conj = |m: &DMatrix<f64>, a: &DMatrix<f64>| {
            let mut out = a * m * a.transpose();
            symmetrize(&mut out);
            out
        };
        let rt = r.transpose();
        let u = SpatialFactorPosterior {
            row_means: &self.u.row_means * r,
            row_covs: self.u.row_covs.iter().map(|c| conj(c, &rt)).collect(),
            gamma: self.u.gamma.clone(),
        };
        let v = TemporalFactorPosterior {
            means: &self.v.means * r_inv.transpose(),
            cov_diag: self.v.cov_diag.iter().map(|c| conj(c, &r_inv)).collect(),
            cov_superdiag: self
                .v
                .cov_superdiag
                .iter()
                .map(|c| &r_inv * c * r_inv.transpose())
                .collect(),
            prior_mean: self.v.prior_mean.clone(),
            prior_cov: self.v.prior_cov.clone(),
        };
        Ok(Self {
            u,
            v,
            f: self.f.clone(),
        })
    }

    pub fn restrict(&self, keep: &[usize]) -> Self {
        let sub = |m: &DMatrix<f64>| m.select_rows(keep).select_columns(keep);
        let u = SpatialFactorPosterior {
            row_means: self.u.row_means.select_columns(keep),
            row_covs: self.u.row_covs.iter().map(sub).collect(),
            gamma: self.u.gamma.select_rows(keep),
        };
        let v = TemporalFactorPosterior {
            means: self.v.means.select_columns(keep),
            cov_diag: self.v.cov_diag.iter().map(sub).collect(),
            cov_superdiag: self.v.cov_superdiag.iter().map(sub).collect(),
            prior_mean: self.v.prior_mean.select_rows(keep),
            prior_cov: sub(&self.v.prior_cov),
        };
        let f = TransitionPosterior::from_rows(
            sub(&self.f.row_means),
            keep.iter().map(|&i| sub(&self.f.row_covs[i])).collect(),
            self.f.upsilon.select_rows(keep),
        );
        Self { u, v, f }
    }
}

/// Rotation `R` that makes `E[UᵀU]` and `E[VᵀV]` equal and diagonal after
/// `U ↦ U R`, `V ↦ V R⁻ᵀ`, with the diagonal sorted in decreasing order.
/// `None` when either Gram matrix is not positive definite.
pub fn balancing_rotation(gu: &DMatrix<f64>, gv: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = nalgebra::Cholesky::new(gu.clone())?.unpack();
    let lv = nalgebra::Cholesky::new(gv.clone())?.unpack();
    let svd = crate::linalg::svd(&(lu.transpose() * lv), true, false).ok()?;
    let a = svd.u?;
    let r = a.ncols();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let mut scaled = DMatrix::zeros(r, r);
    for (k, &j) in order.iter().enumerate() {
        let s = svd.singular_values[j];
        if !(s > 0.0) {
            return None;
        }
        scaled.set_column(k, &(a.column(j) * s.sqrt()));
    }
    let lu_t_inv = lu.transpose().try_inverse()?;
    Some(lu_t_inv * scaled)
}

/// Per dimension, `Σ_k ([μᵁ_k]_i² + [μⱽ_k]_i²)` over `Σ_k ([Ξᵁ_k]_ii + [Ξⱽ_kk]_ii)`.
/// Near zero when the posterior of that column is indistinguishable from
/// its zero-mean prior.
pub fn column_relevance(factors: &Factors) -> DVector<f64> {
    let (u, v) = (&factors.u, &factors.v);
    DVector::from_fn(factors.rank(), |i, _| {
        let signal = u.row_means.column(i).norm_squared() + v.means.column(i).norm_squared();
        let spread: f64 = u.row_covs.iter().map(|c| c[(i, i)]).sum::<f64>()
            + v.cov_diag.iter().map(|c| c[(i, i)]).sum::<f64>();
        signal / spread
    })
}

/// Drop every latent dimension whose `γ̂` exceeds `threshold` or whose
/// [`column_relevance`] is below `min_relevance`. At least one dimension is
/// always kept. Returns the kept indices alongside the reduced factors.
pub fn prune_rank(factors: &Factors, threshold: f64, min_relevance: f64) -> (Factors, Vec<usize>) {
    let relevance = column_relevance(factors);
    let mut keep: Vec<usize> = surviving_dims(&factors.u.gamma, threshold)
        .into_iter()
        .filter(|&i| relevance[i] >= min_relevance)
        .collect();
    if keep.is_empty() {
        keep = surviving_dims(&factors.u.gamma, threshold);
        if keep.len() > 1 {
            let best = keep
                .iter()
                .copied()
                .max_by(|&a, &b| relevance[a].total_cmp(&relevance[b]));
            keep = best.into_iter().collect();
        }
    }
    if keep.len() == factors.rank() {
        return (factors.clone(), keep);
    }
    (factors.restrict(&keep), keep)
}

/// One entry of the iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub x_conv: f64,
    pub estimate_norm: f64,
    pub rank: usize,
    pub beta: f64,
}

/// Everything the driver carries between iterations.
#[derive(Debug, Clone)]
pub struct VbfsiState {
    pub factors: Factors,
    pub beta: f64,
    /// The subspace prior aligned with the current latent dimensions.
    pub prior: SubspacePrior,
    pub estimate: DMatrix<f64>,
    pub config: VbConfig,
    pub trace: Vec<IterationRecord>,
}

impl VbfsiState {
    /// Initial posteriors: unit covariances, `γ̂ = υ̂ = 1`, zero transition
    /// mean, `β̂ = 1 / var(Z)`. Means are i.i.d. `N(0, 1/r)` draws, replaced
    /// under [`InitMethod::Svd`] by the leading scaled singular vectors of the
    /// zero-filled observations divided by the sampling fraction.
    pub fn init(
        obs: &ObservationSet,
        prior: &SubspacePrior,
        config: &VbConfig,
        r_init: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if r_init == 0 {
            return Err(Error::InvalidParameter("r_init must be at least 1".into()));
        }
        if obs.is_empty() {
            return Err(Error::NoObservations);
        }
        let (n, t, r) = (obs.n_locations(), obs.n_timesteps(), r_init);
        let mut rng = stream(seed, Stream::Init);
        let scale = 1.0 / (r as f64).sqrt();
        let mut draw = |rows: usize| {
            DMatrix::from_fn(rows, r, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let mut u_means = draw(n);
        let mut v_means = draw(t);
        if config.init == InitMethod::Svd {
            let filled = obs.to_dense().map(|x| if x.is_nan() { 0.0 } else { x });
            let svd = crate::linalg::svd(&(filled / obs.sampling_fraction()), true, true)?;
            let (Some(su), Some(sv)) = (svd.u, svd.v_t) else {
                return Err(Error::Singular("initial SVD".into()));
            };
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            for (k, &j) in order.iter().take(r).enumerate() {
                let s = svd.singular_values[j].sqrt();
                u_means.set_column(k, &(su.column(j) * s));
                v_means.set_column(k, &(sv.row(j).transpose() * s));
            }
        }
        let prior = if prior.is_inactive() {
            SubspacePrior::none(n)
        } else if prior.n_rows() != n {
            return Err(Error::Dimension(format!(
                "subspace prior has {} rows, data has {}",
                prior.n_rows(),
                n
            )));
        } else if prior.rank() > r {
            prior.restrict(&(0..r).collect::<Vec<_>>())?
        } else {
            prior.clone()
        };
        let identity = DMatrix::<f64>::identity(r, r);
        let u = SpatialFactorPosterior {
            row_means: u_means,
            row_covs: vec![identity.clone(); n],
            gamma: DVector::from_element(r, 1.0),
        };
        let v = TemporalFactorPosterior {
            means: v_means,
            cov_diag: vec![identity.clone(); t],
            cov_superdiag: vec![DMatrix::zeros(r, r); t.saturating_sub(1)],
            prior_mean: DVector::zeros(r),
            prior_cov: identity.clone(),
        };
        let f = TransitionPosterior::from_rows(
            DMatrix::zeros(r, r),
            vec![identity; r],
            DVector::from_element(r, 1.0),
        );

        let count = obs.len() as f64;
        let mean = obs.values().sum::<f64>() / count;
        let var = obs.values().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
        let beta = clamp_positive(1.0 / var, config.beta_max);

        let factors = Factors { u, v, f };
        let estimate = factors.estimate();
        Ok(Self {
            factors,
            beta,
            prior,
            estimate,
            config: config.clone(),
            trace: Vec::new(),
        })
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    /// `q(V)`, `q(F)`, `υ̂`, `β̂`.
    pub fn update_temporal(&mut self, obs: &ObservationSet) -> Result<()> {
        let fac = &mut self.factors;
        fac.v = update_v(
            obs,
            &fac.u,
            &fac.f,
            self.beta,
            &fac.v.prior_mean,
            &fac.v.prior_cov,
        )?;
        fac.f = update_f(&fac.v, &fac.f.upsilon, self.config.jitter)?;
        fac.f.upsilon = update_upsilon(&fac.f, self.config.beta_max);
        self.beta = self.next_beta(obs);
        Ok(())
    }

    pub(crate) fn next_beta(&self, obs: &ObservationSet) -> f64 {
        let fac = &self.factors;
        update_beta(
            obs,
            &fac.u,
            &fac.v,
            self.config.beta_rule,
            self.config.beta_max,
        )
    }

    /// `q(U)`, `γ̂`, `β̂`.
    pub fn update_spatial(&mut self, obs: &ObservationSet) -> Result<()> {
        let fac = &mut self.factors;
        fac.u = update_u(
            obs,
            &fac.v,
            &self.prior,
            &fac.u.gamma,
            self.beta,
            self.config.jitter,
        )?;
        fac.u.gamma = update_gamma(&fac.u, &fac.v, self.config.beta_max);
        self.beta = self.next_beta(obs);
        Ok(())
    }

    /// Recompute `X̂`, prune, and return `X_conv`.
    pub fn finish_iteration(&mut self) -> Result<f64> {
        let estimate = self.factors.estimate();
        let old_norm = self.estimate.norm();
        let diff = (&estimate - &self.estimate).norm();
        let x_conv = if old_norm > 0.0 {
            diff / old_norm
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        self.estimate = estimate;
        self.prune()?;
        self.trace.push(IterationRecord {
            x_conv,
            estimate_norm: self.estimate.norm(),
            rank: self.rank(),
            beta: self.beta,
        });
        Ok(x_conv)
    }

    fn prune(&mut self) -> Result<()> {
        let (pruned, keep) = prune_rank(
            &self.factors,
            self.config.rank_prune_threshold,
            self.config.prune_relevance,
        );
        if keep.len() == self.rank() {
            return Ok(());
        }
        let prior_keep: Vec<usize> = keep
            .iter()
            .copied()
            .filter(|&i| i < self.prior.rank())
            .collect();
        if prior_keep.len() != self.prior.rank() {
            self.prior = self.prior.restrict(&prior_keep)?;
        }
        self.factors = pruned;
        Ok(())
    }

    /// Rotate the factors to the balanced basis and refresh `q(F)` and `γ̂`.
    /// Skipped when an active prior covers only part of the dimensions.
    pub fn rebalance(&mut self) -> Result<()> {
        let r = self.rank();
        if !self.prior.is_inactive() && self.prior.rank() != r {
            return Ok(());
        }
        let (gu, gv) = self.factors.gram_matrices();
        let Some(rot) = balancing_rotation(&gu, &gv) else {
            return Ok(());
        };
        let mut rotated = self.factors.rotate(&rot)?;
        rotated.u.gamma = update_gamma(&rotated.u, &rotated.v, self.config.beta_max);
        rotated.f = update_f(&rotated.v, &self.factors.f.upsilon, self.config.jitter)?;
        if !self.prior.is_inactive() {
            self.prior = self.prior.rotate(&rot)?;
        }
        self.factors = rotated;
        Ok(())
    }

    /// One full pass of the coordinate ascent.
    pub fn iterate(&mut self, obs: &ObservationSet) -> Result<f64> {
        self.update_temporal(obs)?;
        self.update_spatial(obs)?;
        if self.config.rebalance {
            self.rebalance()?;
        }
        self.finish_iteration()
    }
}

/// Output of [`run_vbfsi`].
#[derive(Debug, Clone)]
pub struct VbfsiResult {
    /// `X̂ = μᵁ μⱽᵀ`.
    pub estimate: DMatrix<f64>,
    pub factors: Factors,
    pub beta: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
}

impl VbfsiResult {
    pub fn rank(&self) -> usize {
        self.factors.rank()
    }
}

/// Run coordinate ascent until `X_conv < conv_tol` or `max_iters`.
/// Hitting the iteration cap is reported through `converged`, not as an error.
pub fn run_vbfsi(
    obs: &ObservationSet,
    prior: &SubspacePrior,
    config: &VbConfig,
    r_init: usize,
    seed: u64,
) -> Result<VbfsiResult> {
    let mut state = VbfsiState::init(obs, prior, config, r_init, seed)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let x_conv = state.iterate(obs)?;
        iterations += 1;
        if x_conv < config.conv_tol {
            converged = true;
            break;
        }
    }
    Ok(VbfsiResult {
        estimate: state.estimate,
        factors: state.factors,
        beta: state.beta,
        converged,
        iterations,
        trace: state.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::obsdata::Entry;
    use crate::oracle::{dense_v_posterior, dense_v_update, transition_regression, DenseVProblem};
    use crate::rng::indexed_stream;
    use crate::synth::{make_synthetic, SynthSpec};

    fn obs(n: usize, t: usize, cells: &[(usize, usize, f64)]) -> ObservationSet {
        let entries = cells
            .iter()
            .map(|&(row, col, value)| Entry { row, col, value })
            .collect();
        ObservationSet::new(n, t, entries, 0).unwrap()
    }

    fn chain(means: DMatrix<f64>) -> TemporalFactorPosterior {
        let (t, r) = means.shape();
        TemporalFactorPosterior {
            means,
            cov_diag: vec![DMatrix::zeros(r, r); t],
            cov_superdiag: vec![DMatrix::zeros(r, r); t.saturating_sub(1)],
            prior_mean: DVector::zeros(r),
            prior_cov: DMatrix::identity(r, r),
        }
    }

    fn spatial(means: DMatrix<f64>) -> SpatialFactorPosterior {
        let (n, r) = means.shape();
        SpatialFactorPosterior {
            row_means: means,
            row_covs: vec![DMatrix::zeros(r, r); n],
            gamma: DVector::from_element(r, 1.0),
        }
    }

    fn random_factors(n: usize, t: usize, r: usize, seed: u64) -> Factors {
        let mut rng = indexed_stream(seed, Stream::Init, 7);
        let mut normal =
            |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let spd = |a: DMatrix<f64>| &a * a.transpose() * 0.1 + DMatrix::identity(r, r) * 0.05;
        let u = SpatialFactorPosterior {
            row_means: normal(n, r),
            row_covs: (0..n).map(|_| spd(normal(r, r))).collect(),
            gamma: DVector::from_fn(r, |i, _| 1.0 + i as f64),
        };
        let fm = normal(r, r) * 0.3;
        let f = TransitionPosterior::from_rows(
            fm,
            (0..r).map(|_| spd(normal(r, r))).collect(),
            DVector::from_element(r, 2.0),
        );
        let mut v = chain(normal(t, r));
        v.cov_diag = (0..t).map(|_| spd(normal(r, r))).collect();
        Factors { u, v, f }
    }

    #[test]
    fn unobserved_row_takes_the_ard_prior() {
        let o = obs(2, 2, &[(0, 0, 1.0), (0, 1, 2.0)]);
        let v = chain(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]));
        let gamma = DVector::from_vec(vec![2.0, 4.0]);
        let u = update_u(&o, &v, &SubspacePrior::none(2), &gamma, 3.0, 1e-10).unwrap();
        assert_eq!(u.mean(1), DVector::zeros(2));
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.25]));
        assert!((&u.row_covs[1] - expected).norm() < 1e-15);
    }

    #[test]
    fn strong_prior_pins_unobserved_row() {
        let o = obs(2, 2, &[(0, 0, 1.0)]);
        let v = chain(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.7]));
        let target = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 1.5, -0.8]);
        let covs = vec![
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        ];
        let prior = SubspacePrior::new(target.clone(), covs, 1e8).unwrap();
        let u = update_u(&o, &v, &prior, &DVector::from_element(2, 1.0), 1.0, 1e-10).unwrap();
        assert!((u.mean(1) - target.row(1).transpose()).amax() < 1e-6);
    }

    #[test]
    fn scalar_u_update() {
        let o = obs(1, 1, &[(0, 0, 2.0)]);
        let v = chain(DMatrix::from_element(1, 1, 1.0));
        let u = update_u(
            &o,
            &v,
            &SubspacePrior::none(1),
            &DVector::from_element(1, 1.0),
            1.0,
            1e-10,
        )
        .unwrap();
        assert!((u.row_covs[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((u.row_means[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_step_v_system() {
        let o = obs(1, 2, &[(0, 0, 1.0)]);
        let u = spatial(DMatrix::from_element(1, 1, 1.0));
        let f = TransitionPosterior::from_rows(
            DMatrix::from_element(1, 1, 0.5),
            vec![DMatrix::zeros(1, 1)],
            DVector::from_element(1, 1.0),
        );
        let m1 = DVector::zeros(1);
        let l1 = DMatrix::identity(1, 1);
        let sys = assemble_v_system(&o, &u, &f, 1.0, &m1, &l1).unwrap();
        let (psi, rhs) = sys.to_dense();
        assert_eq!(psi, DMatrix::from_row_slice(2, 2, &[2.25, -0.5, -0.5, 1.0]));
        assert_eq!(rhs, DVector::from_vec(vec![1.0, 0.0]));
        // Ψ⁻¹ = [[1, 0.5], [0.5, 2.25]] / 2
        let post = update_v(&o, &u, &f, 1.0, &m1, &l1).unwrap();
        assert!((post.means[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((post.means[(1, 0)] - 0.25).abs() < 1e-14);
        assert!((post.cov_superdiag[0][(0, 0)] - 0.25).abs() < 1e-14);
        assert!((post.cov_diag[1][(0, 0)] - 1.125).abs() < 1e-14);
    }

    #[test]
    fn uninformative_data_gives_zero_chain() {
        // one observation on a location whose factor is exactly zero
        let o = obs(2, 4, &[(1, 2, 0.0)]);
        let u = spatial(DMatrix::zeros(2, 2));
        let f = TransitionPosterior::prior(DVector::from_element(2, 1.0));
        let sys = assemble_v_system(
            &o,
            &u,
            &f,
            1.0,
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        // E[FᵀF] = Σ_i Ξᶠ_i = 2I for two unit-covariance rows
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(sys.diag[0], &i2 * 3.0);
        assert_eq!(sys.diag[1], &i2 * 3.0);
        assert_eq!(sys.diag[3], i2);
        let v = update_v(
            &o,
            &u,
            &f,
            1.0,
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(v.means, DMatrix::zeros(4, 2));
    }

    #[test]
    fn single_step_is_ridge() {
        let o = obs(3, 1, &[(0, 0, 1.0), (2, 0, -2.0)]);
        let u = spatial(DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 0.5, 9.0, 9.0, -1.0, 2.0],
        ));
        let f = TransitionPosterior::prior(DVector::from_element(2, 1.0));
        let beta = 2.0;
        let v = update_v(
            &o,
            &u,
            &f,
            beta,
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -1.0, 2.0]);
        let z = DVector::from_vec(vec![1.0, -2.0]);
        let precision = a.transpose() * &a * beta + DMatrix::identity(2, 2);
        let expected = precision
            .clone()
            .lu()
            .solve(&(a.transpose() * z * beta))
            .unwrap();
        assert!((v.mean(0) - expected).norm() < 1e-13);
        assert!((&v.cov_diag[0] - precision.try_inverse().unwrap()).norm() < 1e-13);
    }

    #[test]
    fn v_update_matches_dense_posterior() {
        for seed in 0..5 {
            let (n, t, r) = (6, 5, 2);
            let fac = random_factors(n, t, r, seed);
            let mut rng = indexed_stream(seed, Stream::Mask, 0);
            let cells: Vec<_> = (0..n)
                .flat_map(|i| (0..t).map(move |j| (i, j)))
                .filter(|_| rng.random_bool(0.5))
                .map(|(i, j)| (i, j, (i as f64 - j as f64) * 0.3))
                .collect();
            let o = obs(n, t, &cells);
            let m1 = DVector::from_vec(vec![0.2, -0.1]);
            let l1 = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
            let got = update_v(&o, &fac.u, &fac.f, 1.7, &m1, &l1).unwrap();
            let want = dense_v_update(&DenseVProblem {
                obs: &o,
                u_means: &fac.u.row_means,
                u_covs: &fac.u.row_covs,
                f_mean: &fac.f.row_means,
                f_second_moment: &fac.f.second_moment,
                beta: 1.7,
                prior_mean: &m1,
                prior_cov: &l1,
            })
            .unwrap();
            for tau in 0..t {
                assert!((got.mean(tau) - &want.means[tau]).norm() < 1e-10);
                assert!((&got.cov_diag[tau] - &want.cov_diag[tau]).norm() < 1e-10);
            }
            for tau in 0..t - 1 {
                assert!((&got.cov_superdiag[tau] - &want.cov_superdiag[tau]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_chain_gives_prior_transition() {
        let v = chain(DMatrix::zeros(5, 2));
        let upsilon = DVector::from_vec(vec![2.0, 5.0]);
        let f = update_f(&v, &upsilon, 1e-10).unwrap();
        assert_eq!(f.row_means, DMatrix::zeros(2, 2));
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.2]));
        for c in &f.row_covs {
            assert!((c - &expected).norm() < 1e-15);
        }
        let single = update_f(&chain(DMatrix::zeros(1, 2)), &upsilon, 1e-10).unwrap();
        assert!((&single.row_covs[1] - &expected).norm() < 1e-15);
    }

    #[test]
    fn geometric_chain_recovers_coefficient() {
        let v = chain(DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 0.25]));
        let f = update_f(&v, &DVector::from_element(1, 1e-12), 1e-10).unwrap();
        assert!((f.row_means[(0, 0)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn transition_matches_joint_regression() {
        for (seed, r) in [(1, 1), (2, 2), (3, 3)] {
            let t = 7;
            let (v_mean, v_cov) = {
                // a valid joint Gaussian over vec(V): take any SPD block-tridiagonal posterior
                let fac = random_factors(5, t, r, seed);
                let cells: Vec<_> = (0..5).map(|i| (i, i % t, 0.7 * i as f64)).collect();
                let o = obs(5, t, &cells);
                let p = DenseVProblem {
                    obs: &o,
                    u_means: &fac.u.row_means,
                    u_covs: &fac.u.row_covs,
                    f_mean: &fac.f.row_means,
                    f_second_moment: &fac.f.second_moment,
                    beta: 1.0,
                    prior_mean: &DVector::zeros(r),
                    prior_cov: &DMatrix::identity(r, r),
                };
                dense_v_posterior(&p).unwrap()
            };
            let block = |a: usize, b: usize| v_cov.view((a * r, b * r), (r, r)).into_owned();
            let v = TemporalFactorPosterior {
                means: DMatrix::from_fn(t, r, |tau, k| v_mean[tau * r + k]),
                cov_diag: (0..t).map(|k| block(k, k)).collect(),
                cov_superdiag: (0..t - 1).map(|k| block(k, k + 1)).collect(),
                prior_mean: DVector::zeros(r),
                prior_cov: DMatrix::identity(r, r),
            };
            let upsilon: Vec<f64> = (0..r).map(|i| 0.5 + i as f64).collect();
            let got = update_f(&v, &DVector::from_column_slice(&upsilon), 1e-12).unwrap();
            let want = transition_regression(&v_mean, &v_cov, r, &upsilon).unwrap();
            assert!((&got.row_means - &want.mean).norm() <= 1e-10 * want.mean.norm().max(1.0));
            for i in 0..r {
                assert!((&got.row_covs[i] - &want.row_covs[i]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn beta_scalar_and_clamps() {
        let o = obs(1, 1, &[(0, 0, 1.0)]);
        let u = spatial(DMatrix::from_element(1, 1, 1.0));
        let v = chain(DMatrix::from_element(1, 1, 0.5));
        assert_eq!(update_beta(&o, &u, &v, BetaRule::PlugIn, 1e12), 4.0);
        assert_eq!(update_beta(&o, &u, &v, BetaRule::Expected, 1e12), 4.0);
        let exact = chain(DMatrix::from_element(1, 1, 1.0));
        assert_eq!(update_beta(&o, &u, &exact, BetaRule::PlugIn, 1e12), 1e12);

        let mut u2 = spatial(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        u2.row_covs[0][(0, 0)] = 0.5;
        let v2 = chain(DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        let gamma = update_gamma(&u2, &v2, 1e12);
        assert_eq!(gamma[1], 1e12);
        assert!((gamma[0] - 2.0 / 5.5).abs() < 1e-15);
    }

    #[test]
    fn expected_residual_adds_variance_terms() {
        let o = obs(1, 1, &[(0, 0, 1.0)]);
        let mut u = spatial(DMatrix::from_element(1, 1, 1.0));
        u.row_covs[0][(0, 0)] = 0.5;
        let mut v = chain(DMatrix::from_element(1, 1, 0.5));
        v.cov_diag[0][(0, 0)] = 0.2;
        // (1 - 0.5)² + 1·0.2 + 0.25·0.5 + 0.5·0.2
        let want = 0.25 + 0.2 + 0.125 + 0.1;
        assert!((expected_residual_sq(&o, &u, &v) - want).abs() < 1e-15);
    }

    #[test]
    fn upsilon_update() {
        let f = TransitionPosterior::from_rows(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 2.0]),
            vec![DMatrix::identity(2, 2); 2],
            DVector::from_element(2, 1.0),
        );
        let ups = update_upsilon(&f, 1e12);
        assert!((ups[0] - 2.0 / 4.0).abs() < 1e-15);
        assert!((ups[1] - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_pruning() {
        let mut fac = random_factors(4, 3, 3, 5);
        let (same, keep) = prune_rank(&fac, 1e8, 0.0);
        assert_eq!(keep, vec![0, 1, 2]);
        assert_eq!(same, fac);

        fac.u.gamma = DVector::from_vec(vec![1.0, 1e9, 1.0]);
        let (pruned, keep) = prune_rank(&fac, 1e8, 0.0);
        assert_eq!(keep, vec![0, 2]);
        assert_eq!(pruned.rank(), 2);
        assert_eq!(pruned.v.means.ncols(), 2);
        assert_eq!(pruned.f.row_means.shape(), (2, 2));
        assert_eq!(pruned.f.row_covs.len(), 2);
        assert_eq!(pruned.v.cov_superdiag[0].shape(), (2, 2));
        assert_eq!(pruned.u.row_means.column(1), fac.u.row_means.column(2));
        assert_eq!(pruned.f.row_means[(1, 0)], fac.f.row_means[(2, 0)]);

        fac.u.gamma = DVector::from_vec(vec![3e9, 1e9, 2e9]);
        let (_, keep) = prune_rank(&fac, 1e8, 0.0);
        assert_eq!(keep, vec![1]);
    }

    #[test]
    fn dead_column_pruning_keeps_estimate() {
        let mut fac = random_factors(5, 4, 3, 9);
        fac.u.row_means.column_mut(1).fill(0.0);
        fac.v.means.column_mut(1).fill(0.0);
        let before = fac.estimate();
        let relevance = column_relevance(&fac);
        assert_eq!(relevance[1], 0.0);
        assert!(relevance[0] > 0.0 && relevance[2] > 0.0);
        let (pruned, keep) = prune_rank(&fac, 1e8, 1e-6);
        assert_eq!(keep, vec![0, 2]);
        assert!((pruned.estimate() - before).norm() <= 1e-12);
    }

    #[test]
    fn balancing_rotation_properties() {
        let fac = random_factors(8, 6, 3, 4);
        let (gu, gv) = fac.gram_matrices();
        let rot = balancing_rotation(&gu, &gv).unwrap();
        let rotated = fac.rotate(&rot).unwrap();
        assert!((rotated.estimate() - fac.estimate()).norm() < 1e-10 * fac.estimate().norm());
        let (gu2, gv2) = rotated.gram_matrices();
        assert!((&gu2 - &gv2).norm() < 1e-9 * gu2.norm());
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(gu2[(i, j)].abs() < 1e-9 * gu2.norm());
                }
            }
        }
        assert!(gu2[(0, 0)] >= gu2[(1, 1)] && gu2[(1, 1)] >= gu2[(2, 2)]);
    }

    #[test]
    fn rank_one_full_observation() {
        let x = DMatrix::from_fn(4, 4, |i, j| (i as f64 + 1.0) * (0.5 - j as f64));
        let o = ObservationSet::from_dense(&x, 0).unwrap();
        let res = run_vbfsi(&o, &SubspacePrior::none(4), &VbConfig::default(), 3, 0).unwrap();
        let mre = (&res.estimate - &x).norm() / x.norm();
        assert!(mre <= 1e-3, "mre {mre}");
        assert!(res.converged);
    }

    #[test]
    fn zero_eta_matches_no_prior() {
        let spec = SynthSpec {
            n: 20,
            t: 16,
            ..SynthSpec::default()
        };
        let s = make_synthetic(&spec).unwrap();
        let o = &s.days()[0];
        let cfg = VbConfig {
            max_iters: 15,
            ..VbConfig::default()
        };
        let a = run_vbfsi(o, &SubspacePrior::none(20), &cfg, 5, 3).unwrap();
        let prev = random_factors(20, 16, 5, 1).u;
        let zero = SubspacePrior::from_posterior(&prev, 0.0).unwrap();
        let b = run_vbfsi(o, &zero, &cfg, 5, 3).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.factors, b.factors);
    }

    #[test]
    fn covariances_stay_positive_definite() {
        let spec = SynthSpec {
            n: 25,
            t: 20,
            seed: 2,
            ..SynthSpec::default()
        };
        let s = make_synthetic(&spec).unwrap();
        let o = &s.days()[0];
        for init in [InitMethod::Svd, InitMethod::Random] {
            let cfg = VbConfig {
                init,
                ..VbConfig::default()
            };
            let mut state = VbfsiState::init(o, &SubspacePrior::none(25), &cfg, 6, 1).unwrap();
            let z_norm = o.values().map(|x| x * x).sum::<f64>().sqrt();
            for _ in 0..20 {
                let x_conv = state.iterate(o).unwrap();
                assert!(x_conv >= 0.0);
                let fac = &state.factors;
                for c in fac
                    .u
                    .row_covs
                    .iter()
                    .chain(&fac.v.cov_diag)
                    .chain(&fac.f.row_covs)
                {
                    assert_eq!(c, &c.transpose());
                    assert!(min_eigenvalue(c) > 0.0);
                }
                assert!(fac.u.gamma.iter().all(|&g| g > 0.0));
                assert!(state.beta > 0.0);
                assert!(state.estimate.norm() <= 10.0 * z_norm);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(VbConfig::default().validate().is_ok());
        assert!(VbConfig {
            conv_tol: 0.0,
            ..VbConfig::default()
        }
        .validate()
        .is_err());
        assert!(VbConfig {
            max_iters: 0,
            ..VbConfig::default()
        }
        .validate()
        .is_err());
        assert!(VbConfig {
            prune_relevance: -1.0,
            ..VbConfig::default()
        }
        .validate()
        .is_err());
        let o = obs(2, 2, &[(0, 0, 1.0)]);
        assert!(run_vbfsi(&o, &SubspacePrior::none(2), &VbConfig::default(), 0, 0).is_err());
        let bad = SubspacePrior::new(DMatrix::zeros(3, 1), vec![DMatrix::identity(1, 1); 3], 1.0)
            .unwrap();
        assert!(matches!(
            run_vbfsi(&o, &bad, &VbConfig::default(), 1, 0),
            Err(Error::Dimension(_))
        ));
        assert!(SubspacePrior::none(2).with_eta(-1.0).is_err());
    }
}
