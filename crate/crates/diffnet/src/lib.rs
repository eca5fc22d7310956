//! Minimal reverse-mode differentiation for small convolutional models.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification); the aliases below name the two concrete builds.

mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod param;
mod recurrent;
mod scalar;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use optim::{Adam, Optimizer, Sgd};
pub use param::{Param, ParamId, ParamStore};
pub use recurrent::{gated_recurrent_conv, GruConvParams, GruConvVars};
pub use scalar::{Precision, Scalar};
pub use tape::{Conv2dSpec, Deconv2dSpec, Gradients, Tape, Var, PROB_CLIP};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
