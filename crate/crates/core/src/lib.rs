//! Random quasi-periodic paths, quasi-periodic measures and the averaged
//! invariant measure of dissipative SDEs with two-frequency quasi-periodic
//! coefficients.

pub mod acceptance;
pub mod coefficients;
pub mod config;
pub mod cylinder;
pub mod error;
pub mod flow;
pub mod fokker_planck;
pub mod measures;
pub mod noise;
pub mod ou_analytic;
pub mod pullback;
pub mod time;
pub mod transport;

pub use coefficients::{CoefficientSpec, QpCoefficients, TrigTerm};
pub use error::{Error, Result};
pub use noise::{NoisePath, TimeGrid};
pub use time::FixedTime;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
