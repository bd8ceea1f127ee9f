//! Changepoint-aware spectrum occupancy prediction.
//!
//! * [`bocd`]: prior-free Bayesian online changepoint detection with bounded
//!   memory and online hazard estimation.
//! * [`interval_models`]: lognormal and empirical busy/idle duration models
//!   and conditional-failure availability probabilities.
//! * [`predictor`]: the per-sub-band sense-and-predict engine.
//! * [`simulator`]: alternating-renewal spectrum environment with random
//!   changepoints.
//! * [`metrics`]: collision / missed-opportunity scoring.
//! * [`cli`]: JSON-configured experiment runner.

pub mod bocd;
pub mod cli;
pub mod interval_models;
pub mod metrics;
pub mod predictor;
pub mod simulator;
