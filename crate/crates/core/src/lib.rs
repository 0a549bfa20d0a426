//! Correlated Gaussian noise for differentially private distributed mean
//! estimation.
//!
//! Users add exchangeable, negatively correlated Gaussian noise to their
//! vectors so that the noise largely cancels in the aggregate while each
//! individual upload stays private against a server that may also learn
//! the transcripts of a few colluding users.
//!
//! ```
//! use cordp_core::optimizer::{optimal_params, worst_case_mse};
//! use cordp_core::{EstimatorKind, PrivacyBudget, SystemConfig};
//!
//! let cfg = SystemConfig::new(10, 8, 0, 5)?;
//! let budget = PrivacyBudget::new(2.0, 1e-5)?;
//! let p = optimal_params(&cfg, &budget)?;
//! assert!((p.sigma2().unwrap() - 5.466).abs() < 1e-3);
//! let mse = worst_case_mse(&cfg, &p, EstimatorKind::Unbiased)?.mse;
//! assert!((mse - 1.242).abs() < 1e-3);
//! # Ok::<(), cordp_core::Error>(())
//! ```

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod calibration;
pub mod correlated_noise;
pub mod covariance_lab;
pub mod error;
pub mod optimizer;
pub mod rng;
pub mod secagg_toy;
pub mod simulator;
pub mod wire;

pub use calibration::{calibrated_variance, sigma_eps_delta, PrivacyBudget};
pub use error::{Error, Result};
pub use optimizer::{EstimatorKind, NoiseParams, SystemConfig};
