//! Linear-attention encoder/decoder routing models for the TSP and CVRP,
//! trained without labels by alternating parallel local reconstruction
//! (which produces improved pseudo-label solutions) with cross-entropy fitting.
//!
//! Module map:
//! - [`instances`]: generation, solutions, objectives, validators, TSPLIB parsing, dataset files
//! - [`heuristics`]: random insertion and the exact / 2-opt oracles
//! - [`tensor`]: dense arrays, reverse-mode tape, attention kernels, Adam, checkpoints
//! - [`model`]: the encoder, the linear attention decoder and rollouts
//! - [`reconstruction`]: segment sampling, re-decoding and merging (PRC)
//! - [`training`]: policy-gradient warm-up and the self-improvement loop
//! - [`bench`]: allocation-ledger memory benchmark and the probability/distance profile
//! - [`cli`]: run configuration and subcommand implementations

pub mod bench;
pub mod cli;
pub mod heuristics;
pub mod instances;
pub mod model;
pub mod reconstruction;
pub mod rng;
pub mod tensor;
pub mod training;


pub use instances::{Instance, ProblemKind, Solution};
pub use tensor::Real;
