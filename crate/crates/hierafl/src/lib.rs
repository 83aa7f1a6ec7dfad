//! Desk-scale simulator for hierarchical federated learning.
//!
//! A fleet of simulated devices with heterogeneous compute budgets trains
//! nested submodels of a shared multi-exit network. A simulated cloud
//! aggregates their weight deltas by layer alignment, then refines the global
//! model on a small public dataset through ensemble self-distillation: a
//! meta-learner weighs the exits, the weighted ensemble teaches every exit.
//!
//! Module map:
//! - [`tensor`]: dense f64 arrays, numeric kernels, reverse-mode tape
//! - [`model`]: the multi-exit network, parameter store, checkpoints
//! - [`data`]: synthetic/IDX/CSV datasets, public split, device partitions
//! - [`ensemble`]: meta-learner, ensemble outputs, self-distillation
//! - [`protocol`]: devices, local training, aggregation, the round loop
//! - [`harness`]: experiment configs, evaluation, metrics files, ablations

pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
