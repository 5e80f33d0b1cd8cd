//! Multiresolution cloud/snow segmentation engine.
//!
//! Implements a small fully convolutional network stack (dilated
//! convolutions, max pooling, transposed convolutions, batch norm, leaky
//! ReLU), momentum SGD with a logarithmic learning-rate schedule, a
//! synthetic VNIR/SWIR scene generator, confusion-matrix metrics, and a
//! per-pixel random-forest baseline.
//!
//! Core math is generic over the scalar type: `f32` for training, `f64`
//! for finite-difference gradient verification. Concrete aliases
//! [`Tensor32`] and [`Tensor64`] are exported at the crate root.

pub mod data;
pub mod error;
pub mod infer;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rf;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvGeometry, Labels, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = Tensor<f64>;
