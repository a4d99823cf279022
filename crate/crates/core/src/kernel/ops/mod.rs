pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod sample;

pub use elementwise::{broadcast_binary, broadcast_shape, sigmoid};
pub use linalg::matmul;
pub use nn::{conv_out_size, patch_index, positional_embedding, softmax};
pub use sample::{bilinear_sample, identity_grid};
