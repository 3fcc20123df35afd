//! The continual-learning plugin: a masked two-layer adapter with per-task
//! soft masks for training, hard masks for protection and reuse, and the
//! max-pooled gradient conditioning that isolates earlier tasks.

mod mask;
mod plugin;
mod store;

pub use mask::{
    anneal, apply_mask, compute_soft_mask, harden, soft_mask_on_tape, HardMask, SoftMask,
    TemperatureSchedule, TAU_MIN, THETA,
};
pub use plugin::{expand_to_weight_masks, InsertionMode, Phase, PluginState, Site};
pub use store::{accumulate_masks, MaskStore};
