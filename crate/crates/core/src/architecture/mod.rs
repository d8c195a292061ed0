//! The U-shaped model: configuration, tokenization, the network itself,
//! parameter accounting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod patches;

pub use config::ModelConfig;
pub use model::{param_count, DaeFormer};
