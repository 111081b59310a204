//! Online spatio-temporal matrix completion by variational Bayesian
//! filtering with a previous-day subspace prior, plus a robust variant with
//! sparse outliers.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod linalg;
pub mod obsdata;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod robust;
pub mod smoother;
pub mod synth;
pub mod vbfsi;

#[cfg(test)]
mod properties;

pub use error::{Error, Result};
pub use nalgebra;
