//! Tiny transformer masked language model, plugin insertion and task heads.

mod plugged;
mod transformer;

pub use plugged::{Classifier, PluggedModel, PluginConfig, PluginLayout, Route, TrainingStage};
pub use transformer::{BackboneLM, LayerParams, TokenBatch, TransformerConfig, REFERENCE_MAX_LEN};

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore};

/// SHA-256 over the names, shapes and exact bit patterns of `ids`.
pub fn param_digest(store: &ParamStore, ids: &[ParamId]) -> String {
    let mut h = Sha256::new();
    for &id in ids {
        let p = store.get(id);
        h.update(p.name.as_bytes());
        for &s in p.tensor.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests;
