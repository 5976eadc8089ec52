//! Sequential aggregation and rematerialization for full-batch distributed
//! GNN training.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases at the bottom of this file name the common instantiations.

pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod io;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod runtime;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = optim::ParamStore<f32>;
pub type ParamStore64 = optim::ParamStore<f64>;
