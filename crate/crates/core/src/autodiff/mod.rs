//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod check;
pub(crate) mod gemm;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use check::{numeric_gradient, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use ops::{eval_op, OpKind};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState, Parameter, ParameterStore};
pub use tensor::Tensor;
