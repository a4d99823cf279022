//! Dense tensors, reverse-mode differentiation and the neural primitives
//! everything else is built from.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use graph::{BackwardCtx, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
