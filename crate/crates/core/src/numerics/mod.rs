//! Dense `f32` tensors and a reverse-mode differentiation engine over the
//! fixed set of operations the rest of the crate needs.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, probe_gradient, Probe};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;

pub(crate) use graph::{bilinear4, cell_along, frame_pair};
