use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::transformer::{BackboneLM, TokenBatch};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::clplugin::{InsertionMode, Phase, PluginState, Site};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginConfig {
    pub mode: InsertionMode,
    pub attention_hidden: usize,
    pub ffn_hidden: usize,
    pub n_tasks: usize,
    /// One private plugin bank per task instead of a single shared bank.
    pub isolated: bool,
    pub tau_min: f64,
}

/// Installed plugins: `banks[bank][layer] = [attention plugin, ffn plugin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PluginLayout {
    pub mode: InsertionMode,
    pub banks: Vec<Vec<[PluginState; 2]>>,
}

impl PluginLayout {
    pub fn bank_index(&self, task: usize) -> Result<usize> {
        match self.banks.len() {
            1 => Ok(0),
            n if task < n => Ok(task),
            n => Err(Error::Lookup(format!("no plugin bank for task {task} ({n} banks)"))),
        }
    }

    pub fn bank(&self, task: usize) -> Result<&[[PluginState; 2]]> {
        Ok(&self.banks[self.bank_index(task)?])
    }

    pub fn bank_mut(&mut self, task: usize) -> Result<&mut [[PluginState; 2]]> {
        let i = self.bank_index(task)?;
        Ok(&mut self.banks[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &PluginState> {
        self.banks.iter().flatten().flatten()
    }

    pub fn count(&self) -> usize {
        self.iter().count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Which task a forward pass serves and how plugins participate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Route {
    pub task: usize,
    /// `None` bypasses the plugins entirely.
    pub plugins: Option<Phase>,
}

impl Route {
    pub fn plugged(task: usize, phase: Phase) -> Self {
        Route { task, plugins: Some(phase) }
    }

    pub fn backbone(task: usize) -> Self {
        Route { task, plugins: None }
    }
}

/// Parameter groups that receive gradients in a given training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingStage {
    Pretraining,
    /// Task `task`'s plugin bank, its mask embeddings and its MLM head.
    PostTraining { task: usize },
    /// Backbone, the task's plugin bank and its classifier.
    FineTuning { task: usize },
    /// Backbone and classifier only.
    FineTuningBackbone { task: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PluggedModel {
    pub store: ParamStore,
    pub backbone: BackboneLM,
    pub plugins: Option<PluginLayout>,
    /// Per-task MLM output bias used during post-training, indexed by task.
    pub mlm_heads: Vec<ParamId>,
    pub classifiers: BTreeMap<usize, Classifier>,
}

impl PluggedModel {
    pub fn new(config: super::TransformerConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = BackboneLM::new(&mut store, config, rng)?;
        Ok(PluggedModel {
            store,
            backbone,
            plugins: None,
            mlm_heads: Vec::new(),
            classifiers: BTreeMap::new(),
        })
    }

    /// Installs two plugins per transformer layer (attention and FFN site)
    /// per bank, and one MLM head per task initialised from the backbone's.
    pub fn insert_plugins(&mut self, config: &PluginConfig, rng: &mut Rng) -> Result<()> {
        if self.plugins.is_some() {
            return Err(Error::contract("plugins are already inserted"));
        }
        if config.n_tasks == 0 || config.attention_hidden == 0 || config.ffn_hidden == 0 {
            return Err(Error::contract("plugin config needs positive task count and widths"));
        }
        let d = self.backbone.config.d_model;
        let n_banks = if config.isolated { config.n_tasks } else { 1 };
        let mut banks = Vec::with_capacity(n_banks);
        for b in 0..n_banks {
            let mut layers = Vec::with_capacity(self.backbone.config.n_layers);
            for l in 0..self.backbone.config.n_layers {
                let mut make = |site: Site, hidden: usize| {
                    let tag = match site {
                        Site::Attention => "attn",
                        Site::Ffn => "ffn",
                    };
                    PluginState::new(
                        &mut self.store,
                        &format!("plugin.b{b}.l{l}.{tag}"),
                        site,
                        config.mode,
                        d,
                        hidden,
                        config.n_tasks,
                        config.tau_min,
                        rng,
                    )
                };
                let attn = make(Site::Attention, config.attention_hidden)?;
                let ffn = make(Site::Ffn, config.ffn_hidden)?;
                layers.push([attn, ffn]);
            }
            banks.push(layers);
        }
        let base = self.store.tensor(self.backbone.mlm_bias).data().to_vec();
        for t in 0..config.n_tasks {
            let id = self.store.add(format!("mlm_head.task{t}.bias"), Tensor::vector(base.clone())?)?;
            self.mlm_heads.push(id);
        }
        self.plugins = Some(PluginLayout { mode: config.mode, banks });
        Ok(())
    }

    pub fn layout(&self) -> Result<&PluginLayout> {
        self.plugins.as_ref().ok_or_else(|| Error::contract("model has no plugins"))
    }

    pub fn layout_mut(&mut self) -> Result<&mut PluginLayout> {
        self.plugins.as_mut().ok_or_else(|| Error::contract("model has no plugins"))
    }

    /// Adds a zero-bias linear classifier for `task` with weights drawn from `rng`.
    pub fn attach_classifier(&mut self, task: usize, classes: usize, rng: &mut Rng) -> Result<()> {
        if classes < 2 {
            return Err(Error::contract(format!("classifier needs at least 2 classes, got {classes}")));
        }
        if self.classifiers.contains_key(&task) {
            return Err(Error::contract(format!("task {task} already has a classifier")));
        }
        let d = self.backbone.config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let w: Vec<f64> = (0..d * classes).map(|_| rng.gen_range(-bound..=bound)).collect();
        let weight = self.store.add(format!("classifier.task{task}.w"), Tensor::new(vec![d, classes], w)?)?;
        let bias = self.store.add(format!("classifier.task{task}.b"), Tensor::zeros(&[classes]))?;
        self.classifiers.insert(task, Classifier { classes, weight, bias });
        Ok(())
    }

    pub fn classifier(&self, task: usize) -> Result<&Classifier> {
        self.classifiers
            .get(&task)
            .ok_or_else(|| Error::Lookup(format!("no classifier for task {task}")))
    }

    /// Final hidden states `[batch * seq, d_model]`.
    pub fn encode(&self, g: &mut Graph, batch: &TokenBatch, route: Route) -> Result<Var> {
        let bank = match route.plugins {
            Some(phase) => Some((self.layout()?.bank(route.task)?, self.layout()?.mode, phase)),
            None => None,
        };
        let bb = &self.backbone;
        let store = &self.store;
        let mut x = bb.embed(g, store, batch)?;
        for (l, p) in bb.layers.iter().enumerate() {
            let attn = bb.attention(g, store, l, x, batch)?;
            let sum = match bank {
                None => g.add(x, attn)?,
                Some((plugins, InsertionMode::Parallel, phase)) => {
                    let s = g.add(x, attn)?;
                    let d = plugins[l][0].delta(g, store, x, phase)?;
                    g.add(s, d)?
                }
                Some((plugins, InsertionMode::Sequential, phase)) => {
                    let y = plugins[l][0].forward(g, store, attn, phase)?;
                    g.add(x, y)?
                }
            };
            let x1 = bb.norm(g, store, sum, p.ln1_gamma, p.ln1_beta)?;
            let ff = bb.ffn(g, store, l, x1)?;
            let sum = match bank {
                None => g.add(x1, ff)?,
                Some((plugins, InsertionMode::Parallel, phase)) => {
                    let s = g.add(x1, ff)?;
                    let d = plugins[l][1].delta(g, store, x1, phase)?;
                    g.add(s, d)?
                }
                Some((plugins, InsertionMode::Sequential, phase)) => {
                    let y = plugins[l][1].forward(g, store, ff, phase)?;
                    g.add(x1, y)?
                }
            };
            x = bb.norm(g, store, sum, p.ln2_gamma, p.ln2_beta)?;
        }
        Ok(x)
    }

    fn mlm_bias(&self, route: Route) -> Result<ParamId> {
        match route.plugins {
            None => Ok(self.backbone.mlm_bias),
            Some(_) => self
                .mlm_heads
                .get(route.task)
                .copied()
                .ok_or_else(|| Error::Lookup(format!("no MLM head for task {}", route.task))),
        }
    }

    /// Vocabulary logits at the masked positions, in row order, with their targets.
    pub fn mlm_logits(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        labels: &[Option<usize>],
        route: Route,
    ) -> Result<(Var, Vec<usize>)> {
        if labels.len() != batch.rows() {
            return Err(Error::dim(
                "forward_mlm",
                format!("{} labels for {} positions", labels.len(), batch.rows()),
            ));
        }
        let (rows, targets): (Vec<usize>, Vec<usize>) =
            labels.iter().enumerate().filter_map(|(i, l)| l.map(|t| (i, t))).unzip();
        if rows.is_empty() {
            return Err(Error::contract("MLM batch has no masked positions"));
        }
        let h = self.encode(g, batch, route)?;
        let sel = g.select_rows(h, &rows)?;
        let bias = self.mlm_bias(route)?;
        let logits = self.backbone.mlm_logits(g, &self.store, sel, bias)?;
        Ok((logits, targets))
    }

    /// Mean cross-entropy over masked positions (`Some(target)` labels).
    pub fn forward_mlm(&self, g: &mut Graph, batch: &TokenBatch, labels: &[Option<usize>], route: Route) -> Result<Var> {
        let (logits, targets) = self.mlm_logits(g, batch, labels, route)?;
        g.softmax_cross_entropy(logits, &targets)
    }

    /// Class logits `[batch, classes]` from the first-token representation.
    pub fn classify_logits(&self, g: &mut Graph, batch: &TokenBatch, route: Route) -> Result<Var> {
        let c = self.classifier(route.task)?.clone();
        let h = self.encode(g, batch, route)?;
        let pooled = g.select_rows(h, &batch.first_rows())?;
        let w = g.param(&self.store, c.weight);
        let b = g.param(&self.store, c.bias);
        let z = g.matmul(pooled, w)?;
        g.add_row(z, b)
    }

    pub fn forward_classify(&self, g: &mut Graph, batch: &TokenBatch, labels: &[usize], route: Route) -> Result<(Var, Var)> {
        let logits = self.classify_logits(g, batch, route)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        Ok((logits, loss))
    }

    pub fn set_trainable(&mut self, stage: TrainingStage) -> Result<()> {
        self.store.freeze_all();
        let mut on: Vec<ParamId> = Vec::new();
        match stage {
            TrainingStage::Pretraining => on.extend(self.backbone.params()),
            TrainingStage::PostTraining { task } => {
                for pair in self.layout()?.bank(task)? {
                    for p in pair {
                        on.extend(p.weights());
                        on.push(p.embedding(task, 0)?);
                        on.push(p.embedding(task, 1)?);
                    }
                }
                on.push(self.mlm_bias(Route::plugged(task, Phase::Unmasked))?);
            }
            TrainingStage::FineTuning { task } => {
                on.extend(self.backbone.params());
                for pair in self.layout()?.bank(task)? {
                    for p in pair {
                        on.extend(p.weights());
                    }
                }
                let c = self.classifier(task)?;
                on.extend([c.weight, c.bias]);
            }
            TrainingStage::FineTuningBackbone { task } => {
                on.extend(self.backbone.params());
                let c = self.classifier(task)?;
                on.extend([c.weight, c.bias]);
            }
        }
        for id in on {
            self.store.set_trainable(id, true);
        }
        Ok(())
    }
}
