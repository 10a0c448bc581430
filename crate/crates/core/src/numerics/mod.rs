//! Dense tensors, named parameter sets, reverse-mode autodiff and the
//! finite-difference oracle used to test it.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, RELATIVE_ERROR_FLOOR};
pub use graph::{Graph, NodeId, PROB_FLOOR};
pub use params::{sgd_step, ParamSet};
pub use tensor::Tensor;


