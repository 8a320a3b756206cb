//! Dense tensors and exact reverse-mode gradients, audited against central
//! finite differences.

mod graph;
mod params;
mod tensor;

#[cfg(test)]
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use params::{
    evaluate, finite_difference_gradient, finite_difference_gradient_with, grad_check, gradient,
    value_and_gradient, Bound, CheckReport, LossFn, ParamCheck, ParameterSet, Stencil, CHECK_FD_EPSILON,
    DEFAULT_FD_EPSILON,
};
pub use tensor::Tensor;
