//! Desk-scale sparse-training laboratory.
//!
//! Trains a tiny encoder-decoder transformer on synthetic sequence tasks and
//! cross-validates six pruning techniques: gradual magnitude pruning (MP),
//! lottery ticket (LT), stabilized lottery ticket (SLT), constant lottery
//! ticket (CLT), and the two hand-offs SLT-MP and MP-SLT. Masks, rewinds,
//! and checkpoints are bit-exact; pruned matrices can be stored in CSC form
//! with explicit memory accounting.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod plan;
pub mod pruning;
pub mod runner;
pub mod sparse;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
