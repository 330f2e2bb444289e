//! Minimal dense-network toolkit: matrices, layers, optimizer, and a
//! finite-difference gradient checker. Everything is f64 and deterministic
//! given explicit seeds.

pub mod adam;
pub mod dense;
pub mod func;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;

pub use adam::AdamState;
pub use dense::{Activation, DenseLayer, LayerGrads};
pub use func::{l2_normalize, softmax, softmax_rows};
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{dot, Matrix};
pub use mlp::{GradSet, Mlp, MlpTape};
