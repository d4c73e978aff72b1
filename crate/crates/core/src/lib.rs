//! Feedforward ReLU networks encoded as cellular sheaves.
//!
//! The forward pass is the harmonic extension of the input data, reachable
//! by sheaf heat diffusion; training evolves the cochain and the restriction
//! maps jointly on the same discrepancy energy.

// `!(x <= limit)` is used on purpose: it is also true for NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod benchmarks;
pub mod cli;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod linalg;
pub mod network;
pub mod sheaf;
pub mod training;

pub use error::{Result, SheafError};
pub use network::{
    extend_activation, extend_weight, forward_pass, relu_pattern, ActivationPattern, ForwardTrace,
    NetworkSpec, OutputActivation,
};
pub use sheaf::{build_sheaf, BatchCochain, Cochain, Discord, NeuralSheaf, PinLayer, PinSpec, PinStrength};
