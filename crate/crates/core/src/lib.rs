//! Consensus-based distributed continuous-time Kalman filtering under
//! modeling errors.
//!
//! The crate builds the nominal distributed filter from a true system, a
//! mismatched nominal model and a sensor graph, computes its steady-state and
//! transient covariances, evaluates the performance bounds, and checks them by
//! Monte Carlo simulation.

pub mod analysis;
pub mod error;
pub mod filter;
pub mod graph;
pub mod matkit;
pub mod model;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod solvers;

pub use error::{Error, Result};
