//! Batch residual policy optimization on finite MDPs.
//!
//! The crate provides exact dynamic-programming oracles over tabular MDPs,
//! residual policy mixtures with state-action confidences, certified
//! lower bounds on the return gap between a learned policy and the behavior
//! policy that generated the data, the confidence-QP coordinate-ascent
//! learner built on those bounds, a set of batch-RL baselines, and native
//! discrete environments with batch generation.

// indexed loops over matching state/action grids are the natural idiom in
// the numerical kernels here
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod critic;
pub mod datagen;
pub mod error;
pub mod instances;
pub mod mdp;
pub mod residual;
pub mod solver;
pub mod suites;
pub mod value_gap;

pub use error::{Error, Result};
