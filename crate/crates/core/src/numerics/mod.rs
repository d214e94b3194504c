//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
