//! Experiment registry, training loop, checkpoints, evaluation, sweeps and
//! plots for conditioned sound separation.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod plot;
pub mod sweep;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::{ExperimentConfig, KvConfig, Setting};
pub use error::{HarnessError, Result};
pub use eval::{evaluate, EvalReport};
pub use experiment::Experiment;
pub use train::{train, RunRecord, TrainOutcome};

use sha2::{Digest, Sha256};

/// Hex SHA-256 of the compact JSON encoding.
pub fn hash_json(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
