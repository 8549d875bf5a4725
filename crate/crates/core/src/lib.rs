//! One-shot unpaired image-to-image translation with part-global,
//! multi-thread adversarial training.
//!
//! The crate is generic over the floating-point type ([`Scalar`]); the
//! aliases at the bottom of this file fix it to `f64` (training, gradient
//! checks) or `f32` (compact inference).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ConvSpec, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
