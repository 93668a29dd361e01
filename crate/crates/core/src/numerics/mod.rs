//! Differentiable tensor primitives, losses and the Adam optimizer.

pub mod graph;
pub mod kernels;
pub mod optim;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{argmax_rows, cross_entropy, hinge, layernorm, linear, mae, matmul, mse, softmax};
pub use optim::{adam_step, finite_diff_check, AdamConfig, AdamState};
