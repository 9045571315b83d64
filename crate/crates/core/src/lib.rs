//! Prior-guided local self-supervised pretraining for volumetric images.

pub mod align;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
