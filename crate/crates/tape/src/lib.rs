//! Small reverse-mode automatic differentiation tape for dense row-major
//! tensors, with the handful of operations needed by transformer encoders
//! (fused layer norm, batched multi-head attention, GELU) and an AdamW optimizer.

mod graph;
pub mod gradcheck;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{AttnSpec, Graph, Slot, Var};
pub use optim::AdamW;
pub use params::{trunc_normal, Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
