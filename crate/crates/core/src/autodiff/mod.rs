//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The engine is define-by-run: each training step builds a fresh
//! [`Graph`], appending one node per operation, then calls
//! [`Graph::backward`] on the scalar loss. Only the operations needed by the
//! encoder, projection head and contrastive losses are provided.

mod check;
mod gemm;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheck};
pub use graph::{BatchStats, Gradients, Graph, Penalty, Var, NORM_FLOOR};
pub use tensor::Tensor;
