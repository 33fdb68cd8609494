//! Numerical core for training capsule networks as a routing-weighted
//! product of expert neurons.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every piece of math
//! the pipeline uses: a small dense tensor type, a platform-stable RNG,
//! convolution kernels, routing by agreement, the bilinear capsule energy
//! with its Gibbs conditionals and contrastive-divergence gradient, brute
//! force oracles for tiny models, and the convolutional autoencoder used as
//! a frozen front-end. File formats and the command line live in the
//! `capspoe` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod activations;
pub mod autoencoder;
pub mod conv;
pub mod diagram;
pub mod energy;
mod error;
pub mod optim;
pub mod oracles;
pub mod rng;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
