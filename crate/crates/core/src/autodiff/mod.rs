//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gemm;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{ElementwiseOp, Gradients, Graph, Segment, Var};
pub use params::{Checkpoint, CheckpointEntry, ParamId, ParamStore};
pub use tensor::{argmax, Tensor};

/// Epsilon used by every layer normalisation in this crate.
pub const LAYERNORM_EPS: f64 = 1e-5;
