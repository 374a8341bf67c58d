//! Bayesian mortality-rate forecasting.
//!
//! Two model families over an age-by-year grid of death counts and initial
//! exposures:
//!
//! * a dynamic Heligman-Pollard model, where the eight parameters of the
//!   mortality law follow a truncated Gaussian random walk across years and
//!   are sampled with Metropolis-within-Gibbs using weighted-least-squares
//!   informed proposals ([`hpdyn`], [`hpcurve`]);
//! * an intrinsic non-isotropic Gaussian Markov random field on the logit
//!   mortality surface, sampled with a gradient-based auxiliary scheme
//!   ([`gmrf`]).
//!
//! Posterior predictive draws feed forecast summaries and survival curves
//! ([`forecast`]) and a rolling-origin backtest harness with proper scoring
//! rules ([`backtest`]).

pub mod backtest;
pub mod draws;
pub mod forecast;
pub mod gmrf;
pub mod hpcurve;
pub mod hpdyn;
pub mod lifetable;
pub mod linalg;
pub mod samplers;
