//! Continual post-training across a sequence of domains, end-task
//! fine-tuning, protection checks and checkpoints.

mod checkpoint;
mod config;
mod lifecycle;
mod protection;
mod variant;

pub use checkpoint::{Checkpoint, BLOB_FILE, FORMAT_VERSION, MANIFEST_FILE};
pub use config::TrainConfig;
pub use lifecycle::*;
pub use protection::{soft_protection, task_entries, task_view_digest, verify_protection, ProtectionReport};
pub use variant::{Conditioning, ExperimentVariant};

#[cfg(test)]
mod tests;
