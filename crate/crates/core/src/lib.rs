//! Simulation and verification engine for optimal portfolio choice under
//! state-dependent exponential utility.
//!
//! The crate simulates a one-factor market together with a stochastic
//! risk-aversion process, builds the closed-form optimal wealth and strategy
//! processes for several utility families, and certifies (or refutes) their
//! self-consistency and forward-performance properties with Monte Carlo
//! estimators. A small exact finite-state optimizer backs the continuous-time
//! formulas with an independent oracle.
//!
//! All numerical code is generic over the scalar type through [`Real`];
//! the type aliases at the crate root fix `f64` for ordinary use.

pub mod checks;
pub mod convergence;
pub mod error;
pub mod estimators;
pub mod expr;
pub mod oracle;
pub mod paths;
pub mod preferences;
pub mod real;
pub mod rng;
pub mod scenario;
pub mod strategies;

pub use error::{Error, Result};
pub use real::Real;

/// Scenario specification at the default precision.
pub type Scenario = scenario::ScenarioSpec<f64>;
/// Simulated path batch at the default precision.
pub type Batch = paths::PathBatch<f64>;
/// Uniform time grid at the default precision.
pub type Grid = paths::TimeGrid<f64>;
/// Finite-state market for the static oracle at the default precision.
pub type Market = oracle::FiniteMarket<f64>;
/// Monte Carlo estimate at the default precision.
pub type Estimate = estimators::Estimate<f64>;
