//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Graph`]: leaves are added with [`Graph::param`] or
//! [`Graph::constant`], operations return [`Var`] handles, and
//! [`Graph::backward`] walks the recorded nodes in reverse to produce a
//! [`GradientMap`]. [`finite_diff_grad`] is the independent numerical
//! check for all of it.

mod finite_diff;
mod graph;
mod tensor;

pub use finite_diff::finite_diff_grad;
pub use graph::{GradientMap, Graph, NodeId, OpKind, Var};
pub use tensor::Tensor;
