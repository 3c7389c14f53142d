//! On-line Bayesian estimation of the multivariate local level model with a
//! generalized inverse Wishart prior on the observation covariance.

pub mod baselines;
pub mod bench;
pub mod chart;
pub mod cli;
pub mod error;
pub mod filter;
pub mod giw;
pub mod hyperparam;
pub mod io;
pub mod matrix;
pub mod steady;
pub mod volatility;

pub use error::{Error, Result};
