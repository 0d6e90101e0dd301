//! Minimal differentiable numeric core: dense `f64` tensors, the forward
//! kernels the model needs, a reverse-mode tape and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradEntry, GradReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use kernels::{conv1d_valid, gelu, layer_norm, matmul, matmul_ex, softmax_rows};
pub use tensor::{checked_mode, set_checked_mode, Tensor};
