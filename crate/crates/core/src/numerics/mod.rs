//! Dense tensors, the reverse-mode tape, and finite-difference checking.

mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use graph::{sigmoid, BatchMoments, Elementwise, Gradients, Graph, PoolKind, Var};
pub use tensor::Tensor;
