//! Minimal dense numerics: row-major arrays with an allocation ledger, a
//! reverse-mode tape, grouped multi-head attention kernels, Adam and checkpoints.

mod adam;
mod array;
pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use array::{AllocationLedger, Array2};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Eager, Graph, Tape, Var};
pub use kernels::{AttnGroup, AttnLayout, PickGroup, PickLayout};
pub use layers::{
    attention, attention_layer, cross_entropy, cross_entropy_clamp_count, multi_head_attention, AttentionLayerParams, MhaParams,
    CROSS_ENTROPY_FLOOR,
};
pub use params::{Gradients, ParamId, ParamStore};

/// Scalar type of every tensor. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention mask leaves a query row with no unmasked key")]
    DegenerateMask,
    #[error("loss must be 1x1, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("non-finite gradient; optimizer step rejected")]
    NonFiniteGradient,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
