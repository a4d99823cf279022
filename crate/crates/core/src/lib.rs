//! Two-stage virtual try-on built around cloth-person interaction blocks.
//!
//! Stage one regresses a thin-plate-spline warp of an in-shop garment from
//! person and cloth features related through interacting transformer
//! encoders; stage two renders the try-on image with a three-stream
//! reasoning block, a UNet and mask composition.

pub mod encoders;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod matching;
pub mod objectives;
pub mod reasoning;
pub mod tps;

pub use error::{Error, Result};
pub use kernel::{Graph, Tensor, Var};
