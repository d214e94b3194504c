//! Change captioning through a one-head gated attention bottleneck.
//!
//! The crate is generic over the element type ([`Scalar`]); training uses
//! `f32` and gradient checks rebuild the same graphs in `f64`. Concrete
//! aliases for both precisions are exported at the crate root.

pub mod error;
pub mod intervene;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod synthdata;
pub mod training;

pub use error::{Result, TabError};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;


pub type Model32 = model::TabModel<f32>;
pub type Model64 = model::TabModel<f64>;
