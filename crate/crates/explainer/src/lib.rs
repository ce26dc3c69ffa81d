//! Host side of the VAE engine: MNIST IDX loading, model and atlas files,
//! training runs, the `vae` command line and the inference server.

pub mod cli;
pub mod error;
pub mod fetch;
pub mod idx;
pub mod model_io;
pub mod pgm;
pub mod server;
pub mod train;

pub use error::{Error, Result};
