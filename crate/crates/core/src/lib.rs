//! Privacy-alignment auditing for hierarchical feature representations.
//!
//! Layer-wise features are split into sensitive and non-sensitive groups
//! (bottom-up or top-down), sensitive features are perturbed under a
//! calibrated noise mechanism, and the perturbation is compared with a
//! reference mechanism through mixture-parameter discrepancy scores and a
//! set of baseline distribution metrics.

pub mod empa;
pub mod error;
pub mod experiment;
pub mod grouping;
pub mod io;
pub mod metrics;
pub mod microagg;
pub mod model;
pub mod noise;
pub mod projection;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
