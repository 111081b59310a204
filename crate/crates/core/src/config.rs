//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! repeated keys and malformed values are errors.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::obsdata::Dims;
use crate::pipeline::{EtaSchedule, PipelineConfig};
use crate::synth::{ArSpec, SynthSpec};
use crate::vbfsi::{BetaRule, InitMethod};

/// Every recognised key.
pub const KEYS: &[&str] = &[
    // data
    "n",
    "t",
    "missing_token",
    // synthetic generator
    "days",
    "rank",
    "p",
    "noise_std",
    "drift_std",
    "periodic",
    "ar_low",
    "ar_high",
    "outlier_fraction",
    "outlier_magnitude",
    // solver
    "seed",
    "r_init",
    "conv_tol",
    "max_iters",
    "rank_prune_threshold",
    "prune_relevance",
    "beta_max",
    "beta_rule",
    "init",
    "rebalance",
    "jitter",
    // online runs
    "eta",
    "schedule",
    "eta_const",
    "warmup_days",
    // robust
    "robust",
    "outlier_report_threshold",
    "alpha_init",
    "detect_iters",
    "reinstate_k",
    "screen_k",
    "winsor_k",
    "trim_k",
    "flag_k",
];

/// All settings a run can take, with their defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    /// Explicit dimensions for loaded data.
    pub dims: Dims,
    pub missing_token: String,
    pub synth: SynthSpec,
    pub outlier_fraction: f64,
    pub outlier_magnitude: f64,
    pub pipeline: PipelineConfig,
    /// Fixed prior weight; overrides `schedule` when set.
    pub eta: Option<f64>,
    pub schedule: String,
    pub eta_const: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            missing_token: "NaN".into(),
            synth: SynthSpec::default(),
            outlier_fraction: 0.0,
            outlier_magnitude: 100.0,
            pipeline: PipelineConfig::default(),
            eta: None,
            schedule: "traffic".into(),
            eta_const: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

fn set_ar(spec: &mut SynthSpec, low: Option<f64>, high: Option<f64>) {
    let (l0, h0) = match spec.ar {
        ArSpec::Spaced { low, high } => (low, high),
        _ => (0.8, 0.95),
    };
    spec.ar = ArSpec::Spaced {
        low: low.unwrap_or(l0),
        high: high.unwrap_or(h0),
    };
}

impl Settings {
    /// Parse a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: k + 1,
                    message: format!("repeated key {key}"),
                });
            }
            self.set(key, value.trim()).map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match key {
            "n" => {
                let n = parse(key, value)?;
                self.dims.n = Some(n);
                self.synth.n = n;
            }
            "t" => {
                let t = parse(key, value)?;
                self.dims.t = Some(t);
                self.synth.t = t;
            }
            "missing_token" => self.missing_token = value.to_string(),
            "days" => self.synth.days = parse(key, value)?,
            "rank" => self.synth.rank = parse(key, value)?,
            "p" => self.synth.p = parse(key, value)?,
            "noise_std" => self.synth.noise_std = parse(key, value)?,
            "drift_std" => self.synth.drift_std = parse(key, value)?,
            "periodic" => self.synth.periodic = parse_bool(key, value)?,
            "ar_low" => set_ar(&mut self.synth, Some(parse(key, value)?), None),
            "ar_high" => set_ar(&mut self.synth, None, Some(parse(key, value)?)),
            "outlier_fraction" => self.outlier_fraction = parse(key, value)?,
            "outlier_magnitude" => self.outlier_magnitude = parse(key, value)?,
            "seed" => {
                let seed = parse(key, value)?;
                self.synth.seed = seed;
                p.seed = seed;
            }
            "r_init" => p.r_init = parse(key, value)?,
            "conv_tol" => p.vb.conv_tol = parse(key, value)?,
            "max_iters" => p.vb.max_iters = parse(key, value)?,
            "rank_prune_threshold" => p.vb.rank_prune_threshold = parse(key, value)?,
            "prune_relevance" => p.vb.prune_relevance = parse(key, value)?,
            "beta_max" => p.vb.beta_max = parse(key, value)?,
            "beta_rule" => {
                p.vb.beta_rule = match value {
                    "expected" => BetaRule::Expected,
                    "plugin" => BetaRule::PlugIn,
                    _ => return Err(Error::Config(format!("bad value {value:?} for {key}"))),
                }
            }
            "init" => {
                p.vb.init = match value {
                    "svd" => InitMethod::Svd,
                    "random" => InitMethod::Random,
                    _ => return Err(Error::Config(format!("bad value {value:?} for {key}"))),
                }
            }
            "rebalance" => p.vb.rebalance = parse_bool(key, value)?,
            "jitter" => p.vb.jitter = parse(key, value)?,
            "eta" => self.eta = Some(parse(key, value)?),
            "schedule" => self.schedule = value.to_string(),
            "eta_const" => self.eta_const = parse(key, value)?,
            "warmup_days" => p.warmup_days = parse(key, value)?,
            "robust" => p.robust = parse_bool(key, value)?,
            "outlier_report_threshold" => {
                p.robust_config.outlier_report_threshold = Some(parse(key, value)?)
            }
            "alpha_init" => p.robust_config.alpha_init = Some(parse(key, value)?),
            "detect_iters" => p.robust_config.detect_iters = parse(key, value)?,
            "reinstate_k" => p.robust_config.reinstate_k = parse(key, value)?,
            "screen_k" => p.robust_config.screen_k = parse(key, value)?,
            "winsor_k" => p.robust_config.winsor_k = parse(key, value)?,
            "trim_k" => p.robust_config.trim_k = parse(key, value)?,
            "flag_k" => p.robust_config.flag_k = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The prior-weight schedule: constant `eta` when set, else the named one.
    pub fn eta_schedule(&self) -> Result<EtaSchedule> {
        match self.eta {
            Some(eta) => {
                let s = EtaSchedule::Constant(eta);
                s.validate()?;
                Ok(s)
            }
            None => EtaSchedule::from_name(&self.schedule, self.eta_const),
        }
    }

    /// Check every group of settings.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pipeline.vb.validate()?;
        self.pipeline.robust_config.validate()?;
        self.eta_schedule()?;
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidParameter(format!(
                "outlier_fraction {} outside [0, 1]",
                self.outlier_fraction
            )));
        }
        if !(self.outlier_magnitude > 0.0) {
            return Err(Error::InvalidParameter(
                "outlier_magnitude must be positive".into(),
            ));
        }
        if self.pipeline.r_init == 0 {
            return Err(Error::InvalidParameter("r_init must be positive".into()));
        }
        Ok(())
    }
}
