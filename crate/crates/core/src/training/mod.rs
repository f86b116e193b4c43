//! Losses, optimizer, synthetic data and the training loop.

pub mod adam;
pub mod data;
pub mod loss;
pub mod synth;
pub mod train;
