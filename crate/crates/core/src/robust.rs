//! Robust completion: each observed entry carries a sparse outlier
//! `E_ij ~ N(0, 1/α_ij)` on top of the low-rank signal, and the entrywise
//! precisions follow a fixed-point sparse-Bayesian update.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obsdata::{Entry, ObservationSet, SparseMap};
use crate::vbfsi::{
    run_vbfsi, update_beta, Factors, IterationRecord, SpatialFactorPosterior, SubspacePrior,
    TemporalFactorPosterior, VbConfig, VbfsiResult, VbfsiState,
};

/// Bounds applied to every `α̂`.
pub const ALPHA_MIN: f64 = 1e-12;
pub const ALPHA_MAX: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    /// Initial `α̂` on cells the robust start does not flag. `None` uses
    /// `1e6 · β̂₀`.
    pub alpha_init: Option<f64>,
    /// Report `|μᴱ| >` this instead of `3/√β̂`.
    pub outlier_report_threshold: Option<f64>,
    /// Keep every `α̂` at its initial value and skip the robust start.
    pub pin_alpha: bool,
    /// Winsorizing width of the first pilot fit, in robust standard deviations.
    pub winsor_k: f64,
    /// Cells further than this many robust deviations from the first pilot
    /// fit are left out of the second.
    pub trim_k: f64,
    /// Cells further than this many robust deviations from the second pilot
    /// fit start as outliers.
    pub flag_k: f64,
    /// Outer iterations spent on detection before the inlier refit.
    pub detect_iters: usize,
    /// A detected cell is returned to the fit when its residual under the
    /// refit is within this many predictive standard deviations.
    pub reinstate_k: f64,
    /// A cell outside the support joins it when its leave-one-out residual
    /// exceeds this many noise standard deviations.
    pub screen_k: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            alpha_init: None,
            outlier_report_threshold: None,
            pin_alpha: false,
            winsor_k: 3.0,
            trim_k: 2.5,
            flag_k: 6.0,
            detect_iters: 20,
            reinstate_k: 3.0,
            screen_k: 6.0,
        }
    }
}

impl RobustConfig {
    /// Outlier channel switched off: `α̂` pinned at the upper bound.
    pub fn disabled() -> Self {
        Self {
            alpha_init: Some(ALPHA_MAX),
            pin_alpha: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha_init {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(
                    "alpha_init must be positive".into(),
                ));
            }
        }
        if let Some(t) = self.outlier_report_threshold {
            if !(t >= 0.0) {
                return Err(Error::InvalidParameter(
                    "outlier_report_threshold must be non-negative".into(),
                ));
            }
        }
        for (name, k) in [
            ("winsor_k", self.winsor_k),
            ("trim_k", self.trim_k),
            ("flag_k", self.flag_k),
            ("reinstate_k", self.reinstate_k),
            ("screen_k", self.screen_k),
        ] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// `q(E)` on the observed cells, stored in the order of
/// [`ObservationSet::entries`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierPosterior {
    pub cells: Vec<(usize, usize)>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl OutlierPosterior {
    /// Zero means, `Ξᴱ = 1/(β̂ + α)`.
    pub fn new(obs: &ObservationSet, alpha: f64, beta: f64) -> Self {
        let cells: Vec<_> = obs.entries().iter().map(|e| (e.row, e.col)).collect();
        let m = cells.len();
        Self {
            cells,
            means: vec![0.0; m],
            vars: vec![1.0 / (beta + alpha); m],
            alpha: vec![alpha; m],
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn mean_map(&self) -> SparseMap {
        self.cells
            .iter()
            .copied()
            .zip(self.means.iter().copied())
            .collect()
    }

    /// Cells with `|μᴱ| > threshold`.
    pub fn support(&self, threshold: f64) -> SparseMap {
        self.cells
            .iter()
            .zip(&self.means)
            .filter(|(_, m)| m.abs() > threshold)
            .map(|(&c, &m)| (c, m))
            .collect()
    }

    fn check(&self, obs: &ObservationSet) -> Result<()> {
        let same = self.cells.len() == obs.len()
            && self.means.len() == obs.len()
            && self.vars.len() == obs.len()
            && self.alpha.len() == obs.len()
            && obs
                .entries()
                .iter()
                .zip(&self.cells)
                .all(|(e, &c)| (e.row, e.col) == c);
        if same {
            Ok(())
        } else {
            Err(Error::Dimension(
                "outlier support differs from the observed cells".into(),
            ))
        }
    }
}

/// `Ξᴱ = 1/(β̂ + α̂)`, `μᴱ = β̂ Ξᴱ (X − μᵁ μⱽᵀ)` on every observed cell.
pub fn update_outliers(
    obs: &ObservationSet,
    u: &SpatialFactorPosterior,
    v: &TemporalFactorPosterior,
    beta: f64,
    outliers: &OutlierPosterior,
) -> Result<OutlierPosterior> {
    outliers.check(obs)?;
    let mut out = outliers.clone();
    for (k, e) in obs.entries().iter().enumerate() {
        let residual = e.value - u.row_means.row(e.row).dot(&v.means.row(e.col));
        let var = 1.0 / (beta + outliers.alpha[k]);
        out.vars[k] = var;
        out.means[k] = beta * var * residual;
    }
    Ok(out)
}

/// `α̂ ← (1 − α̂ Ξᴱ) / (μᴱ)²`, clamped to `[ALPHA_MIN, ALPHA_MAX]`.
pub fn update_alpha(outliers: &OutlierPosterior) -> OutlierPosterior {
    let mut out = outliers.clone();
    for k in 0..out.len() {
        let m2 = out.means[k] * out.means[k];
        out.alpha[k] = if m2 == 0.0 {
            ALPHA_MAX
        } else {
            let a = (1.0 - outliers.alpha[k] * outliers.vars[k]) / m2;
            if a.is_nan() {
                ALPHA_MAX
            } else {
                a.clamp(ALPHA_MIN, ALPHA_MAX)
            }
        };
    }
    out
}

/// The observations with the current outlier means subtracted.
pub fn cleaned(obs: &ObservationSet, outliers: &OutlierPosterior) -> Result<ObservationSet> {
    let values: Vec<f64> = obs
        .entries()
        .iter()
        .zip(&outliers.means)
        .map(|(e, m)| e.value - m)
        .collect();
    obs.with_values(&values)
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Median and `1.4826 · MAD` of a non-empty sample.
pub fn robust_location_scale(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let center = median(&sorted);
    let mut dev: Vec<f64> = sorted.iter().map(|x| (x - center).abs()).collect();
    dev.sort_by(f64::total_cmp);
    (center, 1.4826 * median(&dev))
}

/// Observations clipped to `median ± k · 1.4826 · MAD`.
pub fn winsorize(obs: &ObservationSet, k: f64) -> Result<ObservationSet> {
    let values: Vec<f64> = obs.values().collect();
    let (center, scale) = robust_location_scale(&values);
    let spread = k * scale;
    if !(spread > 0.0) {
        return Ok(obs.clone());
    }
    let clipped: Vec<f64> = values
        .iter()
        .map(|x| x.clamp(center - spread, center + spread))
        .collect();
    obs.with_values(&clipped)
}

fn residuals(obs: &ObservationSet, estimate: &DMatrix<f64>) -> Vec<f64> {
    obs.entries()
        .iter()
        .map(|e| e.value - estimate[(e.row, e.col)])
        .collect()
}

/// Starting `q(E)` and `β̂₀` from two pilot fits: plain VBFSI on winsorized
/// data, then on the cells within `trim_k` robust deviations of it. Cells
/// beyond `flag_k` deviations of the second fit start with `α = 1/r²`.
fn pilot_outliers(
    obs: &ObservationSet,
    prior: &SubspacePrior,
    config: &VbConfig,
    robust: &RobustConfig,
    r_init: usize,
    seed: u64,
) -> Result<(OutlierPosterior, f64)> {
    let first = run_vbfsi(
        &winsorize(obs, robust.winsor_k)?,
        prior,
        config,
        r_init,
        seed,
    )?;
    let r = residuals(obs, &first.estimate);
    let (_, scale) = robust_location_scale(&r);
    let kept: Vec<Entry> = obs
        .entries()
        .iter()
        .zip(&r)
        .filter(|(_, x)| x.abs() <= robust.trim_k * scale)
        .map(|(e, _)| *e)
        .collect();
    // nothing sensible to trim against on exact data
    let second = if kept.is_empty() || kept.len() == obs.len() {
        first
    } else {
        let trimmed =
            ObservationSet::new(obs.n_locations(), obs.n_timesteps(), kept, obs.day_index())?;
        run_vbfsi(&trimmed, prior, config, r_init, seed)?
    };
    let r = residuals(obs, &second.estimate);
    let (_, scale) = robust_location_scale(&r);
    let beta = if scale > 0.0 {
        (1.0 / (scale * scale)).min(config.beta_max)
    } else {
        second.beta
    };
    let quiet = robust
        .alpha_init
        .unwrap_or(1e6 * beta)
        .clamp(ALPHA_MIN, ALPHA_MAX);
    let mut outliers = OutlierPosterior::new(obs, quiet, beta);
    for (k, &x) in r.iter().enumerate() {
        if x.abs() > robust.flag_k * scale {
            let a = (1.0 / (x * x)).clamp(ALPHA_MIN, ALPHA_MAX);
            outliers.alpha[k] = a;
            outliers.vars[k] = 1.0 / (beta + a);
            outliers.means[k] = beta * outliers.vars[k] * x;
        }
    }
    Ok((outliers, beta))
}

/// Coordinate ascent state for the robust model.
#[derive(Debug, Clone)]
pub struct RvbfsiState {
    pub inner: VbfsiState,
    pub outliers: OutlierPosterior,
    pub robust: RobustConfig,
}

impl RvbfsiState {
    /// With `pin_alpha` the start is the plain VBFSI start. Otherwise `q(E)`
    /// and `β̂` come from the pilot fits and the factors are initialized from
    /// the cleaned observations.
    pub fn init(
        obs: &ObservationSet,
        prior: &SubspacePrior,
        config: &VbConfig,
        robust: &RobustConfig,
        r_init: usize,
        seed: u64,
    ) -> Result<Self> {
        robust.validate()?;
        if robust.pin_alpha {
            let inner = VbfsiState::init(obs, prior, config, r_init, seed)?;
            let alpha = robust
                .alpha_init
                .unwrap_or(ALPHA_MAX)
                .clamp(ALPHA_MIN, ALPHA_MAX);
            let outliers = OutlierPosterior::new(obs, alpha, inner.beta);
            return Ok(Self {
                inner,
                outliers,
                robust: robust.clone(),
            });
        }
        let (outliers, beta) = pilot_outliers(obs, prior, config, robust, r_init, seed)?;
        let mut inner = VbfsiState::init(&cleaned(obs, &outliers)?, prior, config, r_init, seed)?;
        inner.beta = beta;
        Ok(Self {
            inner,
            outliers,
            robust: robust.clone(),
        })
    }

    /// `β̂` from the raw residuals of the cells not currently reported as
    /// outliers.
    fn beta(&self, obs: &ObservationSet) -> Result<f64> {
        let threshold = self.report_threshold();
        let kept: Vec<Entry> = obs
            .entries()
            .iter()
            .zip(&self.outliers.means)
            .filter(|(_, m)| m.abs() <= threshold)
            .map(|(e, _)| *e)
            .collect();
        let fac = &self.inner.factors;
        let cfg = &self.inner.config;
        if kept.is_empty() {
            return Ok(update_beta(
                obs,
                &fac.u,
                &fac.v,
                cfg.beta_rule,
                cfg.beta_max,
            ));
        }
        let inliers =
            ObservationSet::new(obs.n_locations(), obs.n_timesteps(), kept, obs.day_index())?;
        Ok(update_beta(
            &inliers,
            &fac.u,
            &fac.v,
            cfg.beta_rule,
            cfg.beta_max,
        ))
    }

    /// One outer iteration; returns `X_conv`.
    pub fn iterate(&mut self, obs: &ObservationSet) -> Result<f64> {
        let z = cleaned(obs, &self.outliers)?;
        self.inner.update_temporal(&z)?;
        self.inner.beta = self.beta(obs)?;
        self.inner.update_spatial(&z)?;
        self.inner.beta = self.beta(obs)?;
        if self.inner.config.rebalance {
            self.inner.rebalance()?;
        }
        let fac = &self.inner.factors;
        self.outliers = update_outliers(obs, &fac.u, &fac.v, self.inner.beta, &self.outliers)?;
        if !self.robust.pin_alpha {
            self.outliers = update_alpha(&self.outliers);
        }
        self.inner.beta = self.beta(obs)?;
        self.inner.finish_iteration()
    }

    pub fn report_threshold(&self) -> f64 {
        self.robust
            .outlier_report_threshold
            .unwrap_or_else(|| 3.0 / self.inner.beta.sqrt())
    }
}

const MAX_SUPPORT_ROUNDS: usize = 3;

/// `μⱽ_jᵀ Σᵁ_i μⱽ_j`; times `β̂` this is the share of `x_ij` in its own fit.
fn leverage(factors: &Factors, i: usize, j: usize) -> f64 {
    let mu_v = factors.v.means.row(j).transpose();
    (mu_v.transpose() * &factors.u.row_covs[i] * &mu_v)[(0, 0)]
}

/// Variance of `x_ij` under the factor posterior plus observation noise.
pub fn predictive_variance(factors: &Factors, beta: f64, i: usize, j: usize) -> f64 {
    let mu_u = factors.u.row_means.row(i).transpose();
    let mu_v = factors.v.means.row(j).transpose();
    let su = &factors.u.row_covs[i];
    let sv = &factors.v.cov_diag[j];
    let from_v = (mu_u.transpose() * sv * &mu_u)[(0, 0)];
    let from_u = (mu_v.transpose() * su * &mu_v)[(0, 0)];
    let joint = (su * sv).trace();
    from_v + from_u + joint + 1.0 / beta
}

/// Plain VBFSI on the cells not flagged.
fn refit(
    obs: &ObservationSet,
    flagged: &[bool],
    prior: &SubspacePrior,
    config: &VbConfig,
    r_init: usize,
    seed: u64,
) -> Result<VbfsiResult> {
    let kept: Vec<Entry> = obs
        .entries()
        .iter()
        .zip(flagged)
        .filter(|(_, f)| !**f)
        .map(|(e, _)| *e)
        .collect();
    if kept.is_empty() {
        return Err(Error::Singular(
            "every observed cell flagged as an outlier".into(),
        ));
    }
    let reduced = ObservationSet::new(obs.n_locations(), obs.n_timesteps(), kept, obs.day_index())?;
    run_vbfsi(&reduced, prior, config, r_init, seed)
}

/// Output of [`run_rvbfsi`].
#[derive(Debug, Clone)]
pub struct RvbfsiResult {
    pub estimate: DMatrix<f64>,
    pub factors: Factors,
    pub beta: f64,
    pub outliers: OutlierPosterior,
    /// `μᴱ` on the cells where it exceeds the report threshold.
    pub outlier_estimate: SparseMap,
    pub report_threshold: f64,
    /// Whether the final fit reached `conv_tol`.
    pub converged: bool,
    /// Iterations of the final fit.
    pub iterations: usize,
    /// Detection iterations preceding the final fit; zero when pinned.
    pub detect_iterations: usize,
    /// Detection records followed by the final fit's records.
    pub trace: Vec<IterationRecord>,
}

impl RvbfsiResult {
    pub fn rank(&self) -> usize {
        self.factors.rank()
    }
}

/// Robust completion in two stages. Detection runs up to `detect_iters`
/// outer iterations of the joint update from the pilot start. The cells
/// whose `|μᴱ|` then exceeds the report threshold form the support `S`,
/// and the factors are refit by plain VBFSI on the remaining cells. `S` is
/// then adjusted against the refit for a few rounds: cells of `S` within
/// `reinstate_k` predictive deviations go back in, and cells outside with a
/// leave-one-out residual beyond `screen_k` noise deviations come out.
/// Finally `q(E)` is recomputed against the last refit with `α̂` held at
/// the upper bound off `S`.
///
/// With `pin_alpha` the joint update runs to convergence from the plain
/// start and no refit happens.
pub fn run_rvbfsi(
    obs: &ObservationSet,
    prior: &SubspacePrior,
    config: &VbConfig,
    robust: &RobustConfig,
    r_init: usize,
    seed: u64,
) -> Result<RvbfsiResult> {
    let mut state = RvbfsiState::init(obs, prior, config, robust, r_init, seed)?;
    if robust.pin_alpha {
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
        let report_threshold = state.report_threshold();
        let outlier_estimate = state.outliers.support(report_threshold);
        return Ok(RvbfsiResult {
            estimate: state.inner.estimate,
            factors: state.inner.factors,
            beta: state.inner.beta,
            outliers: state.outliers,
            outlier_estimate,
            report_threshold,
            converged,
            iterations,
            detect_iterations: 0,
            trace: state.inner.trace,
        });
    }

    let mut detect_iterations = 0;
    while detect_iterations < robust.detect_iters.min(config.max_iters) {
        let x_conv = state.iterate(obs)?;
        detect_iterations += 1;
        if x_conv < config.conv_tol {
            break;
        }
    }
    let threshold = state.report_threshold();
    let mut flagged: Vec<bool> = state
        .outliers
        .means
        .iter()
        .map(|m| m.abs() > threshold)
        .collect();
    let mut fit = refit(obs, &flagged, prior, config, r_init, seed)?;
    for _ in 0..MAX_SUPPORT_ROUNDS {
        let mut changed = false;
        for (e, f) in obs.entries().iter().zip(flagged.iter_mut()) {
            let r = e.value - fit.estimate[(e.row, e.col)];
            let var = predictive_variance(&fit.factors, fit.beta, e.row, e.col);
            if *f {
                if r.abs() <= robust.reinstate_k * var.sqrt() {
                    *f = false;
                    changed = true;
                }
            } else {
                let h = fit.beta * leverage(&fit.factors, e.row, e.col);
                if h < 1.0 && r.abs() / (1.0 - h).sqrt() > robust.screen_k / fit.beta.sqrt() {
                    *f = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        fit = refit(obs, &flagged, prior, config, r_init, seed)?;
    }

    let mut outliers = state.outliers;
    for (a, f) in outliers.alpha.iter_mut().zip(&flagged) {
        if !*f {
            *a = ALPHA_MAX;
        }
    }
    let outliers = update_outliers(obs, &fit.factors.u, &fit.factors.v, fit.beta, &outliers)?;
    let report_threshold = robust
        .outlier_report_threshold
        .unwrap_or_else(|| 3.0 / fit.beta.sqrt());
    let outlier_estimate = outliers.support(report_threshold);
    let mut trace = state.inner.trace;
    trace.extend(fit.trace);
    Ok(RvbfsiResult {
        estimate: fit.estimate,
        factors: fit.factors,
        beta: fit.beta,
        outliers,
        outlier_estimate,
        report_threshold,
        converged: fit.converged,
        iterations: fit.iterations,
        detect_iterations,
        trace,
    })
}

/// F1 score of an estimated support against the true one, by cell. Two
/// empty supports score 1.
pub fn support_f1(estimate: &SparseMap, truth: &SparseMap) -> f64 {
    if estimate.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let hits = estimate.keys().filter(|c| truth.contains_key(c)).count() as f64;
    2.0 * hits / (estimate.len() + truth.len()) as f64
}
