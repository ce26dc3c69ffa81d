//! Convolutional variational autoencoder engine.
//!
//! Everything here is pure computation over in-memory buffers: dense tensors,
//! layers with hand-written backward passes, the Gaussian sampling head
//! (log-variance parameterization plus the reparameterization trick), the
//! ELBO loss and an Adam optimizer. File formats, IO and serving live in the
//! companion `vae-explainer` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod real;

pub mod data;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::SeededRng;
pub use tensor::{Padding, Tensor};
