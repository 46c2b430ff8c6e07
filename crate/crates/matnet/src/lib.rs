//! Matryoshka Networks: hierarchically deep directed generative models with
//! bottom-up, top-down, and merge module structure, trained by stochastic
//! gradient variational inference.
//!
//! The crate is self-contained: a small dense-tensor core with reverse-mode
//! differentiation, probability primitives, the MatNet building blocks and
//! model assembly, an optional masked-convolution autoregressive output head,
//! a deterministic training loop, and dataset plumbing.

pub mod ar;
pub mod check;
pub mod config;
pub mod data;
pub mod dist;
pub mod layers;
pub mod model;
pub mod error;
pub mod rng;
pub mod scalar;
pub mod shape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use shape::Shape;
pub use tensor::tape::{GradMap, Tape};
pub use tensor::{Tensor, TensorId};
