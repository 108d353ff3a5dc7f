//! Bayesian changepoint detection with conditionally Gaussian state space
//! models: filtering and simulation smoothing, indicator sampling with the
//! states integrated out, a dimension-reducing transform for dynamic factor
//! models, and the MCMC scheme tying them together.

pub mod commands;
pub mod config;
pub mod dfm;
pub mod eof;
pub mod error;
pub mod io;
pub mod k_sampler;
pub mod kalman;
pub mod linalg;
pub mod mcmc;
pub mod reduction;
pub mod ssm;

pub use error::{Error, Result};
