//! A decoder-only Transformer whose second half is conditioned on
//! per-token discrete latent codes, trained as a conditional VAE, together
//! with the matching baseline decoder, synthetic data, an exact oracle for
//! a latent coin-flip process, and training and sampling drivers.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod kernels;
pub mod mapper;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sample;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{FreeTransformer, KvCache, ModelConfig, Variant};
pub use tensor::{Scalar, Tensor};
