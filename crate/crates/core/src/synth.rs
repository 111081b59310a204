//! Synthetic day streams drawn from the generative model: a shared spatial
//! factor with small per-day drift, an AR(1) temporal factor with unit
//! innovations, and Gaussian observation noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obsdata::{sample_mask_with, DayStream};
use crate::rng::{indexed_stream, stream, Stream};

/// How the AR transition matrix is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArSpec {
    /// `F = diag(coefficients)`; must have exactly `rank` entries.
    Diagonal(Vec<f64>),
    /// Diagonal coefficients evenly spaced on `[low, high]`.
    Spaced { low: f64, high: f64 },
    /// Explicit `rank × rank` matrix, row-major.
    Matrix(Vec<f64>),
}

impl Default for ArSpec {
    fn default() -> Self {
        ArSpec::Spaced {
            low: 0.8,
            high: 0.95,
        }
    }
}

impl ArSpec {
    pub fn matrix(&self, rank: usize) -> Result<DMatrix<f64>> {
        let f = match self {
            ArSpec::Diagonal(c) => {
                if c.len() != rank {
                    return Err(Error::InvalidParameter(format!(
                        "{} AR coefficients for rank {}",
                        c.len(),
                        rank
                    )));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(c))
            }
            ArSpec::Spaced { low, high } => {
                let step = if rank > 1 {
                    (high - low) / (rank - 1) as f64
                } else {
                    0.0
                };
                DMatrix::from_diagonal(&DVector::from_fn(rank, |i, _| low + step * i as f64))
            }
            ArSpec::Matrix(m) => {
                if m.len() != rank * rank {
                    return Err(Error::InvalidParameter(format!(
                        "AR matrix needs {} entries",
                        rank * rank
                    )));
                }
                DMatrix::from_row_slice(rank, rank, m)
            }
        };
        let radius = f
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if !(radius < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "AR spectral radius {radius} is not below 1"
            )));
        }
        Ok(f)
    }
}

/// Parameters of a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub t: usize,
    pub days: usize,
    pub rank: usize,
    pub ar: ArSpec,
    pub noise_std: f64,
    /// Std of the per-day perturbation of the shared spatial factor (and of
    /// the shared temporal profile when `periodic`).
    pub drift_std: f64,
    /// Every day reuses one AR path as its temporal factor instead of
    /// drawing a fresh one.
    pub periodic: bool,
    /// Sampling fraction of each day's mask.
    pub p: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 60,
            t: 48,
            days: 1,
            rank: 3,
            ar: ArSpec::default(),
            noise_std: 0.01,
            drift_std: 0.0,
            periodic: false,
            p: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 || self.days == 0 {
            return Err(Error::InvalidParameter(
                "n, t and days must be positive".into(),
            ));
        }
        if self.rank == 0 || self.rank > self.n.min(self.t) {
            return Err(Error::InvalidParameter(format!(
                "rank {} must be in 1..={}",
                self.rank,
                self.n.min(self.t)
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.drift_std >= 0.0) {
            return Err(Error::InvalidParameter(
                "noise_std and drift_std must be >= 0".into(),
            ));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "p {} outside (0, 1]",
                self.p
            )));
        }
        self.ar.matrix(self.rank).map(|_| ())
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `t × r` AR(1) path started from a unit Gaussian.
pub fn ar_path<R: Rng>(f: &DMatrix<f64>, t: usize, rng: &mut R) -> DMatrix<f64> {
    let r = f.nrows();
    let mut v = DMatrix::zeros(t, r);
    let mut state = DVector::from_fn(r, |_, _| rng.sample(StandardNormal));
    for tau in 0..t {
        if tau > 0 {
            let noise = DVector::from_fn(r, |_, _| rng.sample(StandardNormal));
            state = f * state + noise;
        }
        v.set_row(tau, &state.transpose());
    }
    v
}

/// Complete matrices `U_d V_dᵀ + noise` for every day.
pub fn synthetic_matrices(spec: &SynthSpec) -> Result<Vec<DMatrix<f64>>> {
    spec.validate()?;
    let f = spec.ar.matrix(spec.rank)?;
    let mut base_rng = stream(spec.seed, Stream::Factors);
    let u_base = normal_matrix(&mut base_rng, spec.n, spec.rank);
    let v_base = spec.periodic.then(|| ar_path(&f, spec.t, &mut base_rng));
    let mut out = Vec::with_capacity(spec.days);
    for d in 0..spec.days {
        let mut rng = indexed_stream(spec.seed, Stream::Factors, d as u64);
        let u = if spec.drift_std > 0.0 {
            &u_base + normal_matrix(&mut rng, spec.n, spec.rank) * spec.drift_std
        } else {
            u_base.clone()
        };
        let v = match &v_base {
            Some(v) if spec.drift_std > 0.0 => {
                v + normal_matrix(&mut rng, spec.t, spec.rank) * spec.drift_std
            }
            Some(v) => v.clone(),
            None => ar_path(&f, spec.t, &mut rng),
        };
        let mut x = u * v.transpose();
        if spec.noise_std > 0.0 {
            let mut noise_rng = indexed_stream(spec.seed, Stream::Noise, d as u64);
            x += normal_matrix(&mut noise_rng, spec.n, spec.t) * spec.noise_std;
        }
        out.push(x);
    }
    Ok(out)
}

/// Synthetic stream with each day's mask sampled at `spec.p`, carrying the
/// complete matrices as ground truth.
pub fn make_synthetic(spec: &SynthSpec) -> Result<DayStream> {
    masked_stream(synthetic_matrices(spec)?, spec.p, spec.seed)
}

/// Sample each complete matrix at fraction `p` (day `d` from its own mask
/// sub-stream of `seed`) and keep the matrices as ground truth.
pub fn masked_stream(truth: Vec<DMatrix<f64>>, p: f64, seed: u64) -> Result<DayStream> {
    let days = truth
        .iter()
        .enumerate()
        .map(|(d, x)| {
            let mut rng = indexed_stream(seed, Stream::Mask, d as u64);
            sample_mask_with(x, p, &mut rng).map(|o| o.with_day_index(d))
        })
        .collect::<Result<Vec<_>>>()?;
    DayStream::new(days)?.with_ground_truth(truth)
}
