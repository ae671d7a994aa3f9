//! Differentiable building blocks: parameter storage and the two graph backends.

mod graph;
mod params;
mod tape;

pub(crate) use graph::{lerp_slices, mse_value};
pub use graph::{Eval, Graph};
pub use params::{ConvInit, ConvParams, ParamId, ParamStore};
pub use tape::{Grads, NodeId, Tape};
