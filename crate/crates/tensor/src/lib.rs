//! Small dense tensor library with define-by-run reverse-mode autodiff.
//!
//! Values are `f32` for training and `f64` for gradient verification; all
//! code is generic over [`Real`]. A [`Tape`] records one forward graph;
//! parameters live in a [`ParamStore`] and receive accumulated gradients
//! from [`Tape::backward`].

mod error;
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{softmax_in_place, Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
