//! Power- and performance-aware tuning of OpenMP-style runtime configurations.
//!
//! Parallel regions are written in a small SSA IR ([`mir`]), turned into
//! flow-aware program graphs ([`graph`]) and classified by a relational graph
//! convolutional network ([`nn`]) into the best (power cap, threads, schedule,
//! chunk) configuration. Ground truth comes from an analytic time/energy model
//! ([`simulator`]) swept over the full search space ([`dataset`]).
//!
//! Data-parallel loops (sweeps, per-example gradients, cross-validation folds,
//! baseline tuning) run on rayon when the `parallel` feature is enabled and
//! fall back to plain iterators otherwise. Reductions are ordered, so both
//! builds produce bit-identical results.

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod graph;
pub mod metrics;
pub mod mir;
pub mod nn;
pub mod par;
pub mod simulator;
pub mod tuner;
