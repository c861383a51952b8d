//! Model-aware, subspace-aware out-of-distribution detection for tabular
//! regression.
//!
//! A regression random forest is fit to the training data. Its terminal
//! nodes are hyperrectangles; relaxing one coordinate bound at a time gives
//! release regions, and how evenly a training point co-occurs with a query
//! across those release regions ranks it as a neighbor. The OOD score is the
//! average importance-weighted distance from the query to its top-K
//! neighbors, restricted to the signal features picked by variable
//! prioritization.
//!
//! The crate also ships the anomaly generators used to benchmark the
//! detector (Gaussian copula modes and shifted Friedman data), a set of
//! non-neural comparison detectors and the evaluation harness.

pub mod anomgen;
pub mod baselines;
pub mod data;
mod error;
pub mod eval;
pub mod forest;
pub mod outpro;
pub mod varprio;

pub use error::{Error, Result};
