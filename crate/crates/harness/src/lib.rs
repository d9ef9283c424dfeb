//! Configuration, orchestration and CSV output for the decentralized
//! Stiefel-manifold simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod suites;
pub mod verify;

pub use config::{parse_config, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use experiment::run_experiment;
