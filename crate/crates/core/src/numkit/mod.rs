//! Dense `f64` tensors with a define-by-run reverse-mode tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
pub(crate) use tensor::kernels;
