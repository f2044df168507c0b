//! Reverse-mode automatic differentiation over dense, row-major `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every leaf that requires them. Operations are coarse (matrix products,
//! depthwise convolutions, framing, overlap-add, normalization) so the tape
//! stays short even for audio-length signals.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names
//! (`separator/stage1/block3/dense_in/weight`). A [`Binder`] maps names to
//! leaf variables on a tape, so a parameter referenced twice (tied weights)
//! receives the sum of both gradient contributions.

mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
mod tape;
mod tensor;

pub use error::AutogradError;
pub use optim::Adam;
pub use params::{Binder, Param, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, Tensor};

pub type Result<T> = std::result::Result<T, AutogradError>;
