//! Simulation-based inference for low simulation budgets.
//!
//! Trains neural posterior (mixture-density) and likelihood-to-evidence
//! ratio estimators as Bayesian neural networks under a Gaussian-process
//! functional prior centered on the simulator's parameter prior, and
//! provides the calibration diagnostics (expected coverage, coverage AUC,
//! nominal log posterior density, uncertainty decomposition) used to
//! verify that the resulting Bayesian model averages are calibrated a
//! priori and conservative a posteriori.

pub mod bnn;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod functional_prior;
pub mod numcore;
pub mod rng;
pub mod runner;
pub mod simulators;
pub mod stats;

pub use error::{Result, SbiError};
pub use numcore::Array;
