//! Dual-path UNet with covariance criss-cross self-attention, built on a
//! small `f64` tensor engine with explicit reverse-mode gradients.

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
