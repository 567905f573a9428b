//! Numeric kernels: accounted tensors, forward and backward kernels, and the
//! autodiff graph that strings them together.

pub mod accountant;
pub mod attention;
mod gemm;
pub mod grad;
pub mod graph;
pub mod kernels;
pub mod tally;
pub mod tensor;

pub use accountant::{current_accountant, with_accountant, BudgetExceeded, MemoryAccountant};
pub use attention::{AttnShape, BandShape};
pub use graph::{Grads, Graph, Var};
pub use kernels::{Affine, Conv1dSpec};
pub use tally::{tally_ops, with_tag, OpTally};
pub use tensor::Tensor;
