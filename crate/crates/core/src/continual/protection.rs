use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::variant::{Conditioning, ExperimentVariant};
use crate::autodiff::{ParamId, ParamStore};
use crate::clplugin::{compute_soft_mask, PluginState};
use crate::error::{Error, Result};
use crate::model::PluggedModel;

/// Elementwise max of `sigma(e_s / tau_min)` over `tasks`, per plugin layer.
pub fn soft_protection(store: &ParamStore, plugin: &PluginState, tasks: Range<usize>, tau_min: f64) -> Result<[Vec<f64>; 2]> {
    let mut out = [vec![0.0f64; plugin.d_hidden], vec![0.0f64; plugin.d_model]];
    for t in tasks {
        for (layer, acc) in out.iter_mut().enumerate() {
            let e = store.tensor(plugin.embedding(t, layer)?).data();
            let m = compute_soft_mask(e, tau_min)?;
            for (a, v) in acc.iter_mut().zip(m.values) {
                *a = a.max(v);
            }
        }
    }
    Ok(out)
}

/// Parameter entries covered by task `task`'s expanded hard masks.
pub fn task_entries(plugin: &PluginState, task: usize) -> Result<Vec<(ParamId, Vec<bool>)>> {
    let masks = [plugin.masks.get(task, 0)?.values.clone(), plugin.masks.get(task, 1)?.values.clone()];
    Ok(plugin
        .hooks_for(&masks)?
        .into_iter()
        .map(|h| (h.param, h.mask.iter().map(|&m| m == 1.0).collect()))
        .collect())
}

/// Hash of every value task `task`'s forward pass can read: backbone,
/// its classifier if attached, and its plugin entries (only the
/// mask-covered ones under hard masking).
pub fn task_view_digest(model: &PluggedModel, variant: ExperimentVariant, task: usize) -> Result<String> {
    let mut h = Sha256::new();
    let mut whole = model.backbone.params();
    if let Some(c) = model.classifiers.get(&task) {
        whole.extend([c.weight, c.bias]);
    }
    let mut feed = |store: &ParamStore, id: ParamId, keep: Option<&[bool]>| {
        let p = store.get(id);
        h.update(p.name.as_bytes());
        for (i, v) in p.tensor.data().iter().enumerate() {
            if keep.map_or(true, |k| k[i]) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    };
    for id in whole {
        feed(&model.store, id, None);
    }
    if let Some(layout) = &model.plugins {
        for pair in layout.bank(task)? {
            for p in pair {
                if variant.conditioning() == Conditioning::Hard {
                    for (id, keep) in task_entries(p, task)? {
                        feed(&model.store, id, Some(&keep));
                    }
                } else {
                    for id in p.weights() {
                        feed(&model.store, id, None);
                    }
                    if variant.conditioning() == Conditioning::Soft {
                        feed(&model.store, p.embedding(task, 0)?, None);
                        feed(&model.store, p.embedding(task, 1)?, None);
                    }
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub task: usize,
    pub variant: ExperimentVariant,
    pub entries_checked: usize,
    pub entries_changed: usize,
    pub max_abs_delta: f64,
}

/// Diffs every parameter entry covered by task `task`'s hard masks between
/// two checkpoints of the same run.
pub fn verify_protection(before: &Checkpoint, after: &Checkpoint, task: usize) -> Result<ProtectionReport> {
    if before.config_digest != after.config_digest || before.variant != after.variant {
        return Err(Error::contract("checkpoints come from different configurations or variants"));
    }
    if before.order != after.order {
        return Err(Error::contract("checkpoints follow different domain orders"));
    }
    for c in [before, after] {
        if task >= c.completed {
            return Err(Error::Lookup(format!("task {task} is not completed in a checkpoint with {} tasks", c.completed)));
        }
    }
    let (a, b) = (&before.model, &after.model);
    let (la, lb) = (a.layout()?, b.layout()?);
    let mut report = ProtectionReport {
        task,
        variant: before.variant,
        entries_checked: 0,
        entries_changed: 0,
        max_abs_delta: 0.0,
    };
    for (pa, pb) in la.bank(task)?.iter().flatten().zip(lb.bank(task)?.iter().flatten()) {
        if pa.masks.get(task, 0)? != pb.masks.get(task, 0)? || pa.masks.get(task, 1)? != pb.masks.get(task, 1)? {
            return Err(Error::Integrity(format!("saved masks of task {task} differ in {}", pa.name)));
        }
        for (id, keep) in task_entries(pa, task)? {
            let va = a.store.tensor(id).data();
            let vb = b.store.tensor(id).data();
            for ((x, y), &k) in va.iter().zip(vb).zip(&keep) {
                if k {
                    report.entries_checked += 1;
                    if x.to_bits() != y.to_bits() {
                        report.entries_changed += 1;
                        report.max_abs_delta = report.max_abs_delta.max((x - y).abs());
                    }
                }
            }
        }
    }
    Ok(report)
}
