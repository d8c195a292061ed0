//! Library behind the `daefusion` command: configuration, attention
//! benchmarks, gradient verification, toy training and ablations.

pub mod bench;
pub mod commands;
pub mod config;

pub use bench::{run_bench, BenchReport, BenchRow, Kernel};
pub use commands::{
    gradcheck, param_count_report, run_ablation, train_summary, train_toy, AblationKind, AblationRow, TrainSummary,
};
pub use config::{Precision, RunConfig};

/// Failure of a command, mapped onto the process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
    #[error(transparent)]
    Core(#[from] daefusion_core::Error),
}

impl CliError {
    /// 0 success, 1 verification or runtime failure, 2 configuration error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Output { .. } | CliError::Core(daefusion_core::Error::Config(_)) => 2,
            CliError::Verification(_) | CliError::Core(_) => 1,
        }
    }
}
