//! Self-localization of a passive receiver in an asynchronous wireless
//! network.
//!
//! Transceivers reply to each other in a known order after a nominal
//! turn-around delay; a passive receiver measures the intervals between
//! consecutive transmissions. From those intervals and Gaussian priors on
//! the anchor positions and delays, the crate estimates every node
//! position and delay with an iterative MAP estimator, and evaluates the
//! estimator against the hybrid Cramér-Rao bound by Monte Carlo.
//!
//! Module map:
//!
//! * [`numerics`]: Cholesky, weighted norms, correlated sampling, finite differences
//! * [`model`]: `g(ϑ)`, `H`, `Q`, the Jacobian and the transmission sequence
//! * [`scenario`]: network definitions read from TOML
//! * [`simulate`]: truth draws and synthetic observations
//! * [`estimate`]: the MAP estimator
//! * [`bound`]: hybrid Cramér-Rao bound, RMSE and error ellipses
//! * [`experiment`]: seeded Monte Carlo campaigns and CSV output

pub mod bound;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod scenario;
pub mod simulate;

pub use error::{Error, Result};
