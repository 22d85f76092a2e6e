//! Depth field networks: multi-view depth estimation by querying a fixed-size
//! latent scene representation with per-pixel camera ray embeddings.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense f64 tensors, a reverse-mode differentiation tape and Adam.
//! * [`geometry`]: pinhole intrinsics, rigid poses, rays, projection.
//! * [`embeddings`]: Fourier camera embeddings and the convolutional image encoder.
//! * [`augment`]: canonical jittering, canonical randomization and virtual cameras.
//! * [`model`]: the latent cross-attention encoder and query decoders.
//! * [`objective`]: training losses, depth metrics and median scaling.
//! * [`scenedata`]: synthetic raycast RGB-D scenes, their on-disk format and sampling.
//! * [`pipeline`]: run configuration, training, evaluation, querying and checkpoints.

pub mod augment;
pub mod embeddings;
pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod scenedata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
