//! Parameter estimation in deviated Gaussian mixtures of experts.
//!
//! Modules map onto the pieces of the estimation pipeline:
//!
//! - [`model`]: atoms, mixing measures, densities, sampling, likelihood
//! - [`gauss`]: Hermite-based Gaussian derivatives, the heat identity and the
//!   distinguishability rank test
//! - [`voronoi`]: Voronoi cells and the losses D1 to D4
//! - [`polysys`]: the polynomial system behind the loss exponents
//! - [`em`]: maximum likelihood by EM with `g0` frozen
//! - [`metrics`]: Total Variation and Hellinger estimates, lower-bound probes
//! - [`harness`]: convergence-rate studies and their configuration

pub mod em;
pub mod error;
pub mod gauss;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod polysys;
pub mod quadrature;
pub mod rng;
pub mod voronoi;

pub use error::{Error, Result};
pub use model::{Atom, Dataset, DeviatedModel, MixingMeasure};
