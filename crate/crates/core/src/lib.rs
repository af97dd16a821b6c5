//! A small CPU deep-learning framework built around the MedNet architecture:
//! tensors, differentiable layers, the MedNet graph builder, an SGD training
//! loop, an image data pipeline and pretrain → fine-tune transfer tooling.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Element, Tensor};
