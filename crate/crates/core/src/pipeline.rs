//! Multi-day online runs: warmup subspace, day-to-day prior carry-over, the
//! η-versus-sampling-rate schedule and held-out error metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obsdata::{DayStream, Entry, ObservationSet, SparseMap};
use crate::robust::{run_rvbfsi, RobustConfig};
use crate::vbfsi::{run_vbfsi, Factors, IterationRecord, SubspacePrior, VbConfig, VbfsiResult};

/// Prior weight as a function of the sampling fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EtaSchedule {
    /// `a₁·exp(b₁·p) + a₂·exp(b₂·p)`.
    Exponential {
        a1: f64,
        b1: f64,
        a2: f64,
        b2: f64,
    },
    Constant(f64),
}

impl EtaSchedule {
    /// Fit for traffic speed data.
    pub const TRAFFIC: EtaSchedule = EtaSchedule::Exponential {
        a1: 1.09,
        b1: -3.87,
        a2: 0.00862,
        b2: 3.76,
    };

    /// Fit for air quality data.
    pub const AIR: EtaSchedule = EtaSchedule::Exponential {
        a1: 1.282,
        b1: -11.18,
        a2: 0.0289,
        b2: 1.74,
    };

    /// `traffic`, `air`, or `constant` (which takes `eta_const`).
    pub fn from_name(name: &str, eta_const: f64) -> Result<Self> {
        let s = match name {
            "traffic" => Self::TRAFFIC,
            "air" => Self::AIR,
            "constant" => Self::Constant(eta_const),
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown schedule '{other}' (traffic, air, constant)"
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn name(&self) -> &'static str {
        match *self {
            s if s == Self::TRAFFIC => "traffic",
            s if s == Self::AIR => "air",
            EtaSchedule::Constant(_) => "constant",
            EtaSchedule::Exponential { .. } => "exponential",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EtaSchedule::Constant(c) if !(c >= 0.0 && c.is_finite()) => Err(
                Error::InvalidParameter(format!("constant eta {c} must be finite and >= 0")),
            ),
            EtaSchedule::Exponential { a1, b1, a2, b2 }
                if ![a1, b1, a2, b2].iter().all(|x| x.is_finite()) =>
            {
                Err(Error::InvalidParameter(
                    "non-finite schedule coefficient".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// η for sampling fraction `p ∈ (0, 1]`. Negative fitted values are clamped
/// to zero.
pub fn eta_for(p: f64, schedule: &EtaSchedule) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling fraction {p} outside (0, 1]"
        )));
    }
    Ok(match *schedule {
        EtaSchedule::Constant(c) => c,
        EtaSchedule::Exponential { a1, b1, a2, b2 } => {
            (a1 * (b1 * p).exp() + a2 * (b2 * p).exp()).max(0.0)
        }
    })
}

/// Prior weights evaluated by the sweep.
pub const ETA_GRID: [f64; 6] = [1.0, 0.9, 0.75, 0.5, 0.25, 0.1];
/// Sampling fractions evaluated by the sweep.
pub const P_GRID: [f64; 6] = [0.05, 0.1, 0.15, 0.25, 0.5, 0.75];

fn check_holdout(
    truth: &DMatrix<f64>,
    estimate: &DMatrix<f64>,
    holdout: &[(usize, usize)],
) -> Result<()> {
    if truth.shape() != estimate.shape() {
        return Err(Error::Dimension(
            "truth and estimate differ in shape".into(),
        ));
    }
    if holdout.is_empty() {
        return Err(Error::InvalidParameter("empty held-out set".into()));
    }
    let (n, t) = truth.shape();
    if let Some(&(i, j)) = holdout.iter().find(|&&(i, j)| i >= n || j >= t) {
        return Err(Error::Dimension(format!(
            "held-out cell ({i}, {j}) outside {n}x{t}"
        )));
    }
    Ok(())
}

/// `‖X(Ω′) − X̂(Ω′)‖ / ‖X(Ω′)‖`.
pub fn mre(
    truth: &DMatrix<f64>,
    estimate: &DMatrix<f64>,
    holdout: &[(usize, usize)],
) -> Result<f64> {
    check_holdout(truth, estimate, holdout)?;
    let (mut err, mut norm) = (0.0, 0.0);
    for &c in holdout {
        err += (truth[c] - estimate[c]).powi(2);
        norm += truth[c].powi(2);
    }
    if norm == 0.0 {
        return Err(Error::InvalidParameter(
            "truth is zero on the held-out set".into(),
        ));
    }
    Ok((err / norm).sqrt())
}

/// Root mean squared error over `Ω′`.
pub fn rmse(
    truth: &DMatrix<f64>,
    estimate: &DMatrix<f64>,
    holdout: &[(usize, usize)],
) -> Result<f64> {
    check_holdout(truth, estimate, holdout)?;
    let err: f64 = holdout
        .iter()
        .map(|&c| (truth[c] - estimate[c]).powi(2))
        .sum();
    Ok((err / holdout.len() as f64).sqrt())
}

/// Settings of an online run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Leading days used only to build the first subspace prior. Zero
    /// starts without a prior.
    pub warmup_days: usize,
    pub r_init: usize,
    pub seed: u64,
    pub robust: bool,
    pub vb: VbConfig,
    pub robust_config: RobustConfig,
    /// Measure wall time per day. Off by default so reports are reproducible.
    pub record_time: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            warmup_days: 8,
            r_init: 10,
            seed: 0,
            robust: false,
            vb: VbConfig::default(),
            robust_config: RobustConfig::default(),
            record_time: false,
        }
    }
}

/// Per-cell mean over the days on which the cell is observed.
pub fn average_days(days: &[ObservationSet]) -> Result<ObservationSet> {
    let first = days.first().ok_or(Error::NoObservations)?;
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for d in days {
        for e in d.entries() {
            let s = sums.entry((e.row, e.col)).or_insert((0.0, 0));
            s.0 += e.value;
            s.1 += 1;
        }
    }
    let entries = sums
        .into_iter()
        .map(|((row, col), (sum, k))| Entry {
            row,
            col,
            value: sum / k as f64,
        })
        .collect();
    ObservationSet::new(
        first.n_locations(),
        first.n_timesteps(),
        entries,
        first.day_index(),
    )
}

/// VBFSI without a prior on the average of the first `warmup_days` days.
/// The returned prior carries that fit's `U` posterior with `η = 0`; set the
/// weight with [`SubspacePrior::with_eta`].
pub fn bootstrap_subspace(
    stream: &DayStream,
    warmup_days: usize,
    config: &PipelineConfig,
) -> Result<(SubspacePrior, VbfsiResult)> {
    if warmup_days == 0 || stream.len() < warmup_days {
        return Err(Error::InvalidParameter(format!(
            "warmup needs {warmup_days} day(s), stream has {}",
            stream.len()
        )));
    }
    let avg = average_days(&stream.days()[..warmup_days])?;
    let (n, _) = stream.shape();
    let fit = run_vbfsi(
        &avg,
        &SubspacePrior::none(n),
        &config.vb,
        config.r_init,
        config.seed,
    )?;
    let prior = SubspacePrior::from_posterior(&fit.factors.u, 0.0)?;
    Ok((prior, fit))
}

/// One evaluated day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub day: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mre: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    pub iters: usize,
    pub converged: bool,
    pub rank: usize,
    pub eta: f64,
    pub seconds: f64,
    /// Reported outlier count (robust runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers: Option<usize>,
    /// F1 of the reported outlier support against known corruption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_f1: Option<f64>,
}

/// Per-day results of an online run plus the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub days: Vec<DayReport>,
    pub seconds: f64,
    pub config: PipelineConfig,
    pub schedule: EtaSchedule,
}

impl RunReport {
    /// One JSON object per day.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for d in &self.days {
            // DayReport has only plain fields, serialization cannot fail
            out.push_str(&serde_json::to_string(d).expect("day report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_json_lines(text: &str) -> Result<Vec<DayReport>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(k, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: k + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Mean MRE over the days that have one.
    pub fn mean_mre(&self) -> Option<f64> {
        let v: Vec<f64> = self.days.iter().filter_map(|d| d.mre).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_rmse(&self) -> Option<f64> {
        let v: Vec<f64> = self.days.iter().filter_map(|d| d.rmse).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Estimates of one evaluated day.
#[derive(Debug, Clone)]
pub struct DayOutput {
    pub day: usize,
    pub estimate: DMatrix<f64>,
    pub factors: Factors,
    /// Reported outliers (robust runs only).
    pub outliers: Option<SparseMap>,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub report: RunReport,
    pub outputs: Vec<DayOutput>,
}

/// Completes every day after the warmup in order. Day `d` uses the `U`
/// posterior of day `d − 1` (the warmup fit for the first day) as its prior,
/// weighted by `eta_for` of its own sampling fraction. Every day is fit with
/// the same seed. Metrics are computed on the unobserved cells when the
/// stream has ground truth.
pub fn run_online(
    stream: &DayStream,
    config: &PipelineConfig,
    schedule: &EtaSchedule,
) -> Result<OnlineRun> {
    schedule.validate()?;
    config.vb.validate()?;
    config.robust_config.validate()?;
    let start = Instant::now();
    let (n, _) = stream.shape();
    let mut prior = if config.warmup_days == 0 {
        SubspacePrior::none(n)
    } else {
        bootstrap_subspace(stream, config.warmup_days, config)?.0
    };
    let mut days = Vec::new();
    let mut outputs = Vec::new();
    for (k, obs) in stream.days().iter().enumerate().skip(config.warmup_days) {
        let day_start = Instant::now();
        let eta = eta_for(obs.sampling_fraction(), schedule)?;
        let day_prior = prior.clone().with_eta(eta)?;
        let (estimate, factors, iters, converged, outliers, trace) = if config.robust {
            let r = run_rvbfsi(
                obs,
                &day_prior,
                &config.vb,
                &config.robust_config,
                config.r_init,
                config.seed,
            )?;
            (
                r.estimate,
                r.factors,
                r.iterations,
                r.converged,
                Some(r.outlier_estimate),
                r.trace,
            )
        } else {
            let r = run_vbfsi(obs, &day_prior, &config.vb, config.r_init, config.seed)?;
            (
                r.estimate,
                r.factors,
                r.iterations,
                r.converged,
                None,
                r.trace,
            )
        };
        let (mre_d, rmse_d) = match stream.ground_truth() {
            Some(truth) => {
                let mut holdout = obs.complement();
                if holdout.is_empty() {
                    // fully observed: report the fit error instead
                    holdout = obs.entries().iter().map(|e| (e.row, e.col)).collect();
                }
                (
                    Some(mre(&truth[k], &estimate, &holdout)?),
                    Some(rmse(&truth[k], &estimate, &holdout)?),
                )
            }
            None => (None, None),
        };
        prior = SubspacePrior::from_posterior(&factors.u, 0.0)?;
        days.push(DayReport {
            day: obs.day_index(),
            mre: mre_d,
            rmse: rmse_d,
            iters,
            converged,
            rank: factors.rank(),
            eta,
            seconds: if config.record_time {
                day_start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            outliers: outliers.as_ref().map(|o| o.len()),
            outlier_f1: None,
        });
        outputs.push(DayOutput {
            day: obs.day_index(),
            estimate,
            factors,
            outliers,
            trace,
        });
    }
    let seconds = if config.record_time {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    Ok(OnlineRun {
        report: RunReport {
            days,
            seconds,
            config: config.clone(),
            schedule: *schedule,
        },
        outputs,
    })
}
