//! Attention-map crowd counting: density-map ground truth, a
//! three-branch multi-scale CNN with spatial-softmax attention, and a
//! small dense-tensor engine with reverse-mode differentiation that
//! the rest of the crate is built on.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`);
//! the `*F` aliases at the crate root pin the double-precision
//! instantiations used by the trainer and the CLI. On-disk formats
//! are always double precision regardless of the in-memory type.

pub mod data;
pub mod density;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::{compensated_sum, sc, Scalar};
pub use tensor::{adam_defaults, adam_step, Parameter, Tensor, TensorError};

/// Double-precision tensor, the default instantiation.
pub type TensorF = Tensor<f64>;
/// Double-precision trainable parameter.
pub type ParameterF = Parameter<f64>;
