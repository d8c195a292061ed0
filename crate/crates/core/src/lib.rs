//! Dual efficient attention segmentation transformer on a small
//! reverse-mode tensor engine.
//!
//! Everything numeric is generic over [`numerics::Scalar`] (`f32` or
//! `f64`); the aliases below fix the scalar for the common cases.

pub mod architecture;
pub mod attention;
pub mod blocks;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod training;
pub mod verify;

pub use architecture::{param_count, DaeFormer, ModelConfig};
pub use blocks::DualStrategy;
pub use error::{Error, Result};
pub use numerics::{Scalar, Tape, Tensor, Var};
pub use params::ParamStore;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type SegBatch64 = training::SegBatch<f64>;
pub type SegBatch32 = training::SegBatch<f32>;
