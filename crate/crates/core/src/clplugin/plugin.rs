use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mask::{apply_mask, compute_soft_mask, soft_mask_on_tape, SoftMask};
use super::store::MaskStore;
use crate::autodiff::{GradMaskHook, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Where a plugin's output joins the transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    /// Reads the sublayer input; its delta is added to the sublayer output.
    Parallel,
    /// Reads the sublayer output and rewrites it.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Attention,
    Ffn,
}

/// How the task masks inside a plugin are produced for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    /// Soft masks `sigma(e_t / tau)` recorded on the tape.
    PostTraining { task: usize, tau: f64 },
    /// Saved hard masks of task `task`.
    FineTuning { task: usize },
    /// Saved hard masks of task `task`, evaluation only.
    InferenceOldTask { task: usize },
    /// Soft masks at the store's minimum temperature (the no-threshold ablation).
    SoftFineTuning { task: usize },
    /// No masks: the plugin is a plain two-layer adapter.
    Unmasked,
}

impl Phase {
    pub fn task(&self) -> Option<usize> {
        match *self {
            Phase::PostTraining { task, .. }
            | Phase::FineTuning { task }
            | Phase::InferenceOldTask { task }
            | Phase::SoftFineTuning { task } => Some(task),
            Phase::Unmasked => None,
        }
    }
}

/// Two-layer adapter `x -> relu(x W1 + b1) * m1 -> (. W2 + b2) * m2` with
/// one task mask after each layer and per-task mask embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PluginState {
    pub name: String,
    pub site: Site,
    pub mode: InsertionMode,
    pub d_model: usize,
    pub d_hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// `embeddings[t] = [e_t for layer 0, e_t for layer 1]`.
    pub embeddings: Vec<[ParamId; 2]>,
    pub masks: MaskStore,
}

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

impl PluginState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        site: Site,
        mode: InsertionMode,
        d_model: usize,
        d_hidden: usize,
        n_tasks: usize,
        tau_min: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let a1 = 1.0 / (d_model as f64).sqrt();
        let a2 = 0.1 / (d_hidden as f64).sqrt();
        let w1 = store.add(format!("{name}.w1"), Tensor::new(vec![d_model, d_hidden], uniform(rng, d_model * d_hidden, a1))?)?;
        let b1 = store.add(format!("{name}.b1"), Tensor::zeros(&[d_hidden]))?;
        let w2 = store.add(format!("{name}.w2"), Tensor::new(vec![d_hidden, d_model], uniform(rng, d_hidden * d_model, a2))?)?;
        let b2 = store.add(format!("{name}.b2"), Tensor::zeros(&[d_model]))?;
        let mut embeddings = Vec::with_capacity(n_tasks);
        for t in 0..n_tasks {
            let e0 = store.add(format!("{name}.task{t}.e0"), Tensor::vector(uniform(rng, d_hidden, 1.0))?)?;
            let e1 = store.add(format!("{name}.task{t}.e1"), Tensor::vector(uniform(rng, d_model, 1.0))?)?;
            embeddings.push([e0, e1]);
        }
        Ok(PluginState {
            name: name.to_string(),
            site,
            mode,
            d_model,
            d_hidden,
            w1,
            b1,
            w2,
            b2,
            embeddings,
            masks: MaskStore::new([d_hidden, d_model], tau_min),
        })
    }

    pub fn widths(&self) -> [usize; 2] {
        [self.d_hidden, self.d_model]
    }

    /// Weight, bias and layer input/output extents of internal layer `layer`.
    pub fn layer_params(&self, layer: usize) -> Result<(ParamId, ParamId, usize, usize)> {
        match layer {
            0 => Ok((self.w1, self.b1, self.d_model, self.d_hidden)),
            1 => Ok((self.w2, self.b2, self.d_hidden, self.d_model)),
            _ => Err(Error::Lookup(format!("plugin has no layer {layer}"))),
        }
    }

    pub fn weights(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn embedding(&self, task: usize, layer: usize) -> Result<ParamId> {
        self.embeddings
            .get(task)
            .and_then(|e| e.get(layer))
            .copied()
            .ok_or_else(|| Error::Lookup(format!("{} has no embedding for task {task}", self.name)))
    }

    pub fn soft_mask(&self, store: &ParamStore, task: usize, layer: usize, tau: f64) -> Result<SoftMask> {
        compute_soft_mask(store.tensor(self.embedding(task, layer)?).data(), tau)
    }

    fn resolve_masks(&self, g: &mut Graph, store: &ParamStore, phase: Phase) -> Result<[Option<Var>; 2]> {
        let soft = |g: &mut Graph, task: usize, tau: f64| -> Result<[Option<Var>; 2]> {
            let mut out = [None, None];
            for (layer, slot) in out.iter_mut().enumerate() {
                let e = g.param(store, self.embedding(task, layer)?);
                *slot = Some(soft_mask_on_tape(g, e, tau)?);
            }
            Ok(out)
        };
        match phase {
            Phase::PostTraining { task, tau } => soft(g, task, tau),
            Phase::SoftFineTuning { task } => soft(g, task, self.masks.tau_min()),
            Phase::FineTuning { task } | Phase::InferenceOldTask { task } => {
                let m0 = self.masks.get(task, 0)?.values.clone();
                let m1 = self.masks.get(task, 1)?.values.clone();
                Ok([Some(g.constant_vec(m0)), Some(g.constant_vec(m1))])
            }
            Phase::Unmasked => Ok([None, None]),
        }
    }

    /// The masked adapter output alone, without the skip connection.
    pub fn delta(&self, g: &mut Graph, store: &ParamStore, h: Var, phase: Phase) -> Result<Var> {
        let masks = self.resolve_masks(g, store, phase)?;
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let k1 = g.matmul(h, w1)?;
        let k1 = g.add_row(k1, b1)?;
        let a1 = g.relu(k1);
        let o1 = match masks[0] {
            Some(m) => apply_mask(g, a1, m)?,
            None => a1,
        };
        let k2 = g.matmul(o1, w2)?;
        let k2 = g.add_row(k2, b2)?;
        match masks[1] {
            Some(m) => apply_mask(g, k2, m),
            None => Ok(k2),
        }
    }

    /// `h + delta(h)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, phase: Phase) -> Result<Var> {
        let d = self.delta(g, store, h, phase)?;
        g.add(h, d)
    }

    /// Gradient hooks for both internal layers from per-layer protection vectors.
    pub fn hooks_for(&self, protection: &[Vec<f64>; 2]) -> Result<Vec<GradMaskHook>> {
        let mut hooks = Vec::new();
        for (layer, acc) in protection.iter().enumerate() {
            let (w, b, fan_in, fan_out) = self.layer_params(layer)?;
            hooks.extend(expand_to_weight_masks(acc, w, b, fan_in, fan_out)?);
        }
        Ok(hooks)
    }
}

/// Expands a per-output-neuron protection vector to the layer's weight
/// `[fan_in, fan_out]` (every incoming weight of a protected neuron) and
/// bias. An all-zero vector yields no hooks.
pub fn expand_to_weight_masks(
    accumulated: &[f64],
    weight: ParamId,
    bias: ParamId,
    fan_in: usize,
    fan_out: usize,
) -> Result<Vec<GradMaskHook>> {
    if accumulated.len() != fan_out {
        return Err(Error::dim(
            "expand_to_weight_masks",
            format!("protection vector of length {} for a layer with {fan_out} outputs", accumulated.len()),
        ));
    }
    if accumulated.iter().all(|&a| a == 0.0) {
        return Ok(Vec::new());
    }
    let wmask: Vec<f64> = (0..fan_in).flat_map(|_| accumulated.iter().copied()).collect();
    Ok(vec![
        GradMaskHook { param: weight, mask: wmask },
        GradMaskHook { param: bias, mask: accumulated.to_vec() },
    ])
}
