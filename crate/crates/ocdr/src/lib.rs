//! Offline policy learning over linear policy classes, built around a clipped
//! doubly robust estimator whose clipping threshold is the closed-form
//! minimizer of the empirical MSE.
//!
//! The crate is organized bottom-up:
//!
//! * [`data`] — logged-bandit datasets, linear policies, reward models, CSV I/O.
//! * [`threshold`] — the sorted-IPS suffix-sum machinery computing the
//!   MSE-optimal clipping threshold, with a brute-force oracle.
//! * [`estimators`] — DM / IPW / DR / CDR / OCDR values, the MSE objective
//!   grid, and suboptimality-bound diagnostics.
//! * [`hscop`] — the Heaviside-composite reformulation of the policy
//!   optimization objective and its upper-semicontinuous approximation.
//! * [`mip`] — the full and restricted integer programs plus a built-in exact
//!   branch-and-bound backend for desk-scale instances.
//! * [`pip`] — the progressive integer programming loop (quantile bands,
//!   restricted solves, expand/shrink ratio control).
//! * [`learn`] — the end-to-end learning pipeline and its DR / IPW baselines.
//! * [`bench`] — synthetic data-generating processes, oracle evaluation, and
//!   the seeded experiment runner.

pub mod bench;
pub mod data;
pub mod estimators;
pub mod hscop;
pub mod learn;
pub mod mip;
pub mod pip;
pub mod threshold;

pub use data::{CsvSchema, Dataset, LinearPolicy, RewardModel, Sample};
