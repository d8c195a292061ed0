//! Dense tensors, reverse-mode differentiation and gradient checking.

pub(crate) mod linalg;

pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{AllocLog, Gradients, Tape, Var};
pub use tensor::Tensor;
