//! Optimal experimental design for Bayesian inverse problems.
//!
//! The crate computes sensor placements (or observation-time selections)
//! that minimize A-, c- and D-optimality criteria of a linear-Gaussian
//! posterior, with exact, randomized and measurement-space estimators, and
//! extends the machinery to nonlinear problems through Bayes-risk and
//! Laplace-approximation criteria.
//!
//! Module map:
//! * [`space`]: mass-weighted parameter space and operator handles
//! * [`models`]: advection-diffusion and dense toy forward maps
//! * [`prior`]: elliptic Gaussian prior
//! * [`posterior`]: weight-dependent linear-Gaussian posterior
//! * [`criteria`]: design criteria, estimators and gradients
//! * [`design_opt`]: penalized weight optimization, greedy and exhaustive search
//! * [`nonlinear`]: SEIRD model and nonlinear design criteria

pub mod benchmark;
pub mod criteria;
pub mod design_opt;
pub mod error;
pub mod linalg;
pub mod models;
pub mod nonlinear;
pub mod posterior;
pub mod prior;
pub mod rng;
pub mod space;
pub mod verify;

pub use error::{OedError, Result};
