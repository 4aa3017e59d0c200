//! Numerical substrate: dense matrices, activations, losses, Adam, and
//! finite-difference gradient verification.
//!
//! Everything here is pure, double-precision, and deterministic: identical
//! inputs produce bit-identical outputs.

pub mod activation;
pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod tape;

pub use activation::{gelu, gelu_matrix, gelu_prime, gelu_vec};
pub use adam::{adam_update, AdamConfig, AdamOptimizer, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use loss::{
    cross_entropy, cross_entropy_backward, softmax, softmax_backward, softmax_cross_entropy_grad,
    PROB_CLIP,
};
pub use matrix::{axpy, dot, Matrix};
pub use tape::GradTape;
