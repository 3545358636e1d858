//! Concept-embedding unsupervised domain adaptation with relaxed adversarial
//! alignment.
//!
//! The numeric core ([`tensor`], [`model`], [`losses`], [`optim`], [`oracle`])
//! is generic over the [`Scalar`] type; the aliases below pin the `f64`
//! instantiation used by the trainer, evaluation and CLI.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod game;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
