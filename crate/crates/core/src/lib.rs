//! Decentralized optimization on the Stiefel manifold with compressed
//! communication.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod compression;
pub mod consensus;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod metrics;
pub mod problems;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
pub use linalg::Mat;
