//! Document-level translation toy laboratory: a from-scratch transformer with
//! flat-batch attention and neural context gates, plus training, decoding and
//! evaluation.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod data;
pub mod docflat;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Params64 = model::ModelParams<f64>;
