//! Dense `f64` arrays with reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{log_sum_exp, Gradients, Graph, Var};
pub use optim::Sgd;
pub use tensor::Tensor;
