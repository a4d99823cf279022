//! Data generation, training, persistence and evaluation around the models.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod image_io;
pub mod optim;
pub mod rng;
pub mod train;
