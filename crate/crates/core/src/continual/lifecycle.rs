use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::protection::{soft_protection, task_view_digest};
use super::variant::{Conditioning, ExperimentVariant};
use crate::autodiff::{apply_grad_masks, Adam, AdamConfig, GradMaskHook, Graph};
use crate::clplugin::{accumulate_masks, harden, TemperatureSchedule};
use crate::data::{
    base_corpus, build_vocab, check_disjoint, domain_texts, generate_domain, mlm_mask, sample_few_shot, tokenize,
    tokenize_all, DomainSpec, MlmBatch, SyntheticDomainRecipe, Vocab, PAD,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, macro_f1, Metrics, MetricsMatrix};
use crate::model::{PluggedModel, PluginConfig, Route, TokenBatch, TrainingStage};
use crate::rng::{self, tag};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledIds {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// A domain turned into token ids, with its held-out MLM batch fixed.
#[derive(Clone, Debug)]
pub struct PreparedDomain {
    pub spec: DomainSpec,
    pub corpus: Vec<Vec<usize>>,
    pub mlm_eval: MlmBatch,
}

/// One line of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub tau: Option<f64>,
}

/// Shared inputs of every run under one seed: vocabulary, tokenised
/// domains and the pre-trained backbone.
#[derive(Clone, Debug)]
pub struct Lab {
    pub config: TrainConfig,
    pub seed: u64,
    pub vocab: Vocab,
    pub domains: Vec<PreparedDomain>,
    pub pretrained: PluggedModel,
    pub pretrain_log: Vec<StepRecord>,
}

fn batches<T: Clone>(items: &[T], size: usize) -> impl Iterator<Item = Vec<T>> + '_ {
    items.chunks(size).map(<[T]>::to_vec)
}

impl Lab {
    pub fn new(specs: Vec<DomainSpec>, base_corpus: &[String], config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = BTreeSet::new();
        for s in &specs {
            s.validate()?;
            if !names.insert(s.name.clone()) {
                return Err(Error::contract(format!("domain name {} is used twice", s.name)));
            }
        }
        let vocab = build_vocab(base_corpus.iter().map(String::as_str).chain(specs.iter().flat_map(domain_texts)));
        let max_len = config.max_seq_len;
        let mut domains = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.corpus.len() <= config.eval_docs {
                return Err(Error::contract(format!(
                    "domain {} has {} documents, {} are held out",
                    spec.name,
                    spec.corpus.len(),
                    config.eval_docs
                )));
            }
            let mut corpus = tokenize_all(spec.corpus.iter().map(String::as_str), &vocab, max_len);
            let held = corpus.split_off(corpus.len() - config.eval_docs.max(1));
            if config.eval_docs == 0 {
                corpus.extend(held.iter().cloned());
            }
            let mut r = rng::rng(seed, &[tag("mlm-eval"), tag(&spec.name)]);
            let mlm_eval = mlm_mask(&held, vocab.len(), &mut r)?;
            domains.push(PreparedDomain { spec, corpus, mlm_eval });
        }
        let mut pretrained = PluggedModel::new(config.transformer(vocab.len()), &mut rng::rng(seed, &[tag("backbone")]))?;
        let base = tokenize_all(base_corpus.iter().map(String::as_str), &vocab, max_len);
        let pretrain_log = pretrain(&mut pretrained, &base, &config, seed)?;
        Ok(Lab {
            config,
            seed,
            vocab,
            domains,
            pretrained,
            pretrain_log,
        })
    }

    /// Generates `recipes` and a base-grammar corpus of
    /// `config.pretrain_docs` sentences, then builds the lab.
    pub fn synthetic(recipes: &[SyntheticDomainRecipe], config: TrainConfig, seed: u64) -> Result<Self> {
        let first = recipes.first().ok_or_else(|| Error::contract("no domain recipes"))?;
        check_disjoint(recipes)?;
        let specs = recipes.iter().map(generate_domain).collect::<Result<Vec<_>>>()?;
        let base = base_corpus(first.base_seed, first.base_vocab, config.pretrain_docs, first.min_len, first.max_len, first.base_seed);
        Lab::new(specs, &base, config, seed)
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.spec.name == name)
            .ok_or_else(|| Error::Lookup(format!("no domain named {name}")))
    }

    pub fn names(&self, order: &[usize]) -> Vec<String> {
        order.iter().map(|&i| self.domains[i].spec.name.clone()).collect()
    }

    /// The seed's class-balanced few-shot training set and the full test set.
    pub fn few_shot(&self, domain: usize) -> Result<(Vec<LabeledIds>, Vec<LabeledIds>)> {
        let spec = &self.domains[domain].spec;
        let split = sample_few_shot(
            &spec.train,
            &spec.test,
            spec.classes,
            spec.few_shot_k,
            rng::derive(self.seed, &[tag(&spec.name)]),
        )?;
        let enc = |xs: Vec<crate::data::Example>| {
            xs.into_iter()
                .map(|e| LabeledIds { ids: tokenize(&e.text, &self.vocab, self.config.max_seq_len).ids, label: e.label })
                .collect::<Vec<_>>()
        };
        Ok((enc(split.train), enc(split.test)))
    }

    pub fn check_order(&self, order: &[usize]) -> Result<()> {
        if order.len() < 2 {
            return Err(Error::contract("a continual sequence needs at least 2 domains"));
        }
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.domains.len()).collect::<Vec<_>>() {
            return Err(Error::contract(format!(
                "order {order:?} is not a permutation of the {} registered domains",
                self.domains.len()
            )));
        }
        Ok(())
    }
}

/// Brief MLM training of the bare backbone on base-grammar text.
pub fn pretrain(model: &mut PluggedModel, corpus: &[Vec<usize>], config: &TrainConfig, seed: u64) -> Result<Vec<StepRecord>> {
    let mut log = Vec::with_capacity(config.pretrain_steps);
    if config.pretrain_steps == 0 {
        return Ok(log);
    }
    if corpus.is_empty() {
        return Err(Error::contract("pre-training needs a base corpus"));
    }
    model.set_trainable(TrainingStage::Pretraining)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.pretrain_lr));
    let mut r = rng::rng(seed, &[tag("pretrain")]);
    let vocab = model.backbone.config.vocab_size;
    let mut sampler = DocSampler::new(corpus.len());
    for step in 0..config.pretrain_steps {
        let docs: Vec<Vec<usize>> = sampler.next(config.pretrain_batch, &mut r).iter().map(|&i| corpus[i].clone()).collect();
        let batch = mlm_mask(&docs, vocab, &mut r)?;
        model.store.zero_grads();
        let mut g = Graph::new();
        let loss = model.forward_mlm(&mut g, &batch.inputs, &batch.labels, Route::backbone(0))?;
        log.push(StepRecord { stage: "pretrain".into(), step, loss: g.value(loss)[0], tau: None });
        g.backward(loss, &mut model.store)?;
        adam.step(&mut model.store);
    }
    model.store.freeze_all();
    Ok(log)
}

/// Epoch-wise shuffled document order, reshuffled whenever exhausted.
struct DocSampler {
    order: Vec<usize>,
    pos: usize,
}

impl DocSampler {
    fn new(n: usize) -> Self {
        DocSampler { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, k: usize, r: &mut rng::Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(r);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mutable state of one continual sequence.
#[derive(Clone, Debug)]
pub struct ContinualState {
    pub variant: ExperimentVariant,
    pub model: PluggedModel,
    pub adam: Adam,
    /// Lab domain indices in post-training order.
    pub order: Vec<usize>,
    pub completed: usize,
    /// Task ids at whose start the optimiser state was zeroed.
    pub reset_markers: Vec<usize>,
    pub config_digest: String,
}

impl ContinualState {
    pub fn new(lab: &Lab, variant: ExperimentVariant, order: &[usize]) -> Result<Self> {
        lab.check_order(order)?;
        let mut model = lab.pretrained.clone();
        let cfg = &lab.config;
        model.insert_plugins(
            &PluginConfig {
                mode: variant.insertion_mode(),
                attention_hidden: cfg.attention_plugin,
                ffn_hidden: cfg.ffn_plugin,
                n_tasks: order.len(),
                isolated: variant.isolated_banks(),
                tau_min: cfg.tau_min,
            },
            &mut rng::rng(lab.seed, &[tag("plugins")]),
        )?;
        Ok(ContinualState {
            variant,
            model,
            adam: Adam::new(AdamConfig::with_lr(cfg.post_lr)),
            order: order.to_vec(),
            completed: 0,
            reset_markers: Vec::new(),
            config_digest: cfg.digest(),
        })
    }

    pub fn checkpoint(&self, lab: &Lab) -> Checkpoint {
        Checkpoint {
            variant: self.variant,
            config_digest: self.config_digest.clone(),
            order: lab.names(&self.order),
            completed: self.completed,
            reset_markers: self.reset_markers.clone(),
            vocab: lab.vocab.words().to_vec(),
            model: self.model.clone(),
        }
    }
}

/// Zeroes every Adam moment and the step counter.
pub fn reset_optimizer_state(adam: &mut Adam) {
    adam.reset();
}

/// Gradient hooks protecting what tasks `0..task` use in task `task`'s bank.
fn conditioning_hooks(model: &PluggedModel, variant: ExperimentVariant, task: usize, tau_min: f64) -> Result<Vec<GradMaskHook>> {
    let mut hooks = Vec::new();
    if task == 0 {
        return Ok(hooks);
    }
    for pair in model.layout()?.bank(task)? {
        for p in pair {
            let protection = match variant.conditioning() {
                Conditioning::Off => continue,
                Conditioning::Hard => [accumulate_masks(&p.masks, 0, task)?, accumulate_masks(&p.masks, 1, task)?],
                Conditioning::Soft => soft_protection(&model.store, p, 0..task, tau_min)?,
            };
            hooks.extend(p.hooks_for(&protection)?);
        }
    }
    Ok(hooks)
}

/// Learns domain `task` of the state's order: annealed soft masks in the
/// forward pass, conditioned gradients, and hard masks saved at the end.
pub fn post_train_domain(state: &mut ContinualState, lab: &Lab, task: usize, log: &mut Vec<StepRecord>) -> Result<()> {
    if task != state.completed || task >= state.order.len() {
        return Err(Error::Integrity(format!(
            "domain order violation: task {task} requested after {} completed of {}",
            state.completed,
            state.order.len()
        )));
    }
    let cfg = &lab.config;
    let domain = &lab.domains[state.order[task]];
    let variant = state.variant;
    reset_optimizer_state(&mut state.adam);
    state.adam.config = AdamConfig::with_lr(cfg.post_lr);
    state.reset_markers.push(task);
    state.model.set_trainable(TrainingStage::PostTraining { task })?;
    let hooks = conditioning_hooks(&state.model, variant, task, cfg.tau_min)?;

    let steps = cfg.post_steps(domain.corpus.len());
    let schedule = TemperatureSchedule::new(cfg.tau_min, steps)?;
    let mut r = rng::rng(lab.seed, &[tag("post"), tag(&domain.spec.name)]);
    let mut sampler = DocSampler::new(domain.corpus.len());
    let vocab = lab.vocab.len();
    let stage = format!("post:{}", domain.spec.name);
    for step in 0..steps {
        let tau = schedule.at(step)?;
        let docs: Vec<Vec<usize>> = sampler.next(cfg.post_batch, &mut r).iter().map(|&i| domain.corpus[i].clone()).collect();
        let batch = mlm_mask(&docs, vocab, &mut r)?;
        state.model.store.zero_grads();
        let mut g = Graph::new();
        let route = Route::plugged(task, variant.post_training_phase(task, tau));
        let loss = state.model.forward_mlm(&mut g, &batch.inputs, &batch.labels, route)?;
        log.push(StepRecord { stage: stage.clone(), step, loss: g.value(loss)[0], tau: variant.learns_masks().then_some(tau) });
        g.backward(loss, &mut state.model.store)?;
        apply_grad_masks(&mut state.model.store, &hooks)?;
        state.adam.step(&mut state.model.store);
    }

    if variant.learns_masks() {
        let store = state.model.store.clone();
        for pair in state.model.layout_mut()?.bank_mut(task)? {
            for p in pair.iter_mut() {
                for layer in 0..2 {
                    let soft = p.soft_mask(&store, task, layer, cfg.tau_min)?;
                    p.masks.insert(task, layer, harden(&soft, cfg.theta)?)?;
                }
            }
        }
    }
    state.model.store.freeze_all();
    state.completed += 1;
    Ok(())
}

/// Result of fine-tuning one end task on a disposable copy.
#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub model: PluggedModel,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub predictions: Vec<usize>,
    /// Digest of everything the task's forward pass can read.
    pub digest: String,
    pub losses: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &PluggedModel, examples: &[LabeledIds], route: Route) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.ids.clone()).collect();
        let batch = TokenBatch::new(&seqs, PAD)?;
        let mut g = Graph::new();
        let z = model.classify_logits(&mut g, &batch, route)?;
        let c = g.shape(z)[1];
        out.extend(g.value(z).chunks(c).map(argmax));
    }
    Ok(out)
}

fn fine_tune(
    source: &PluggedModel,
    lab: &Lab,
    domain: usize,
    task: usize,
    route: Route,
    stage: TrainingStage,
    hooks: impl Fn(&PluggedModel) -> Result<Vec<GradMaskHook>>,
) -> Result<FineTuneOutcome> {
    let cfg = &lab.config;
    let spec = &lab.domains[domain].spec;
    let (train, test) = lab.few_shot(domain)?;
    let mut model = source.clone();
    model.classifiers.remove(&task);
    model.attach_classifier(task, spec.classes, &mut rng::rng(lab.seed, &[tag("classifier"), tag(&spec.name)]))?;
    model.set_trainable(stage)?;
    let hooks = hooks(&model)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.ft_lr));
    let mut r = rng::rng(lab.seed, &[tag("fine-tune"), tag(&spec.name)]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.ft_epochs {
        order.shuffle(&mut r);
        for idx in batches(&order, cfg.ft_batch) {
            let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| train[i].ids.clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let batch = TokenBatch::new(&seqs, PAD)?;
            model.store.zero_grads();
            let mut g = Graph::new();
            let (_, loss) = model.forward_classify(&mut g, &batch, &labels, route)?;
            losses.push(g.value(loss)[0]);
            g.backward(loss, &mut model.store)?;
            apply_grad_masks(&mut model.store, &hooks)?;
            adam.step(&mut model.store);
        }
    }
    model.store.freeze_all();
    let predictions = predict(&model, &test, route)?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    Ok(FineTuneOutcome {
        accuracy: accuracy(&predictions, &labels)?,
        macro_f1: macro_f1(&predictions, &labels, spec.classes)?,
        digest: String::new(),
        predictions,
        losses,
        model,
    })
}

/// Fine-tunes task `task` (lab domain `domain`) from a p-LM. Plugin
/// gradients are restricted to the task's own neurons for the masked
/// variants; the source model is never modified.
pub fn fine_tune_end_task(
    source: &PluggedModel,
    variant: ExperimentVariant,
    lab: &Lab,
    domain: usize,
    task: usize,
) -> Result<FineTuneOutcome> {
    let tau_min = lab.config.tau_min;
    let route = Route::plugged(task, variant.task_phase(task));
    let restrict = |m: &PluggedModel| -> Result<Vec<GradMaskHook>> {
        let mut hooks = Vec::new();
        for pair in m.layout()?.bank(task)? {
            for p in pair {
                let keep = match variant.conditioning() {
                    Conditioning::Off => {
                        if variant.learns_masks() {
                            // Still requires the mask to exist.
                            p.masks.get(task, 0)?;
                        }
                        continue;
                    }
                    Conditioning::Hard => [p.masks.get(task, 0)?.values.clone(), p.masks.get(task, 1)?.values.clone()],
                    Conditioning::Soft => soft_protection(&m.store, p, task..task + 1, tau_min)?,
                };
                let protection = keep.map(|v| v.iter().map(|&k| 1.0 - k).collect::<Vec<f64>>());
                hooks.extend(p.hooks_for(&protection)?);
            }
        }
        Ok(hooks)
    };
    let mut out = fine_tune(source, lab, domain, task, route, TrainingStage::FineTuning { task }, restrict)?;
    out.digest = task_view_digest(&out.model, variant, task)?;
    Ok(out)
}

/// Fine-tunes the pre-trained backbone alone, without any post-training.
pub fn fine_tune_backbone_only(lab: &Lab, domain: usize) -> Result<FineTuneOutcome> {
    let route = Route::backbone(0);
    let mut out = fine_tune(&lab.pretrained, lab, domain, 0, route, TrainingStage::FineTuningBackbone { task: 0 }, |_| {
        Ok(Vec::new())
    })?;
    let c = out.model.classifier(0)?;
    let mut ids = out.model.backbone.params();
    ids.extend([c.weight, c.bias]);
    out.digest = crate::model::param_digest(&out.model.store, &ids);
    Ok(out)
}

/// Held-out MLM loss of lab domain `domain` through task `task`'s route.
pub fn eval_mlm(model: &PluggedModel, variant: ExperimentVariant, lab: &Lab, domain: usize, task: usize) -> Result<f64> {
    let batch = &lab.domains[domain].mlm_eval;
    let mut g = Graph::new();
    let loss = model.forward_mlm(&mut g, &batch.inputs, &batch.labels, Route::plugged(task, variant.task_phase(task)))?;
    Ok(g.value(loss)[0])
}

/// Summary of one fine-tuning job inside a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub metrics: Metrics,
    pub digest: String,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub variant: ExperimentVariant,
    pub order: Vec<String>,
    pub checkpoints: Vec<Checkpoint>,
    pub matrix: MetricsMatrix,
    /// `cells[i][j]` mirrors the matrix entry for task `j` after domain `i`.
    pub cells: Vec<Vec<CellOutcome>>,
    pub log: Vec<StepRecord>,
}

/// Post-trains every domain in `order`; after each, fine-tunes and
/// evaluates every end task seen so far.
pub fn run_sequence(lab: &Lab, variant: ExperimentVariant, order: &[usize]) -> Result<SequenceOutcome> {
    let mut state = ContinualState::new(lab, variant, order)?;
    let names = lab.names(order);
    let mut matrix = MetricsMatrix::new(names.clone());
    let mut checkpoints = Vec::with_capacity(order.len());
    let mut cells = Vec::with_capacity(order.len());
    let mut log = Vec::new();
    for (i, _) in order.iter().enumerate() {
        post_train_domain(&mut state, lab, i, &mut log)?;
        let ckpt = state.checkpoint(lab);
        let mut row = Vec::with_capacity(i + 1);
        for (j, &dj) in order.iter().enumerate().take(i + 1) {
            let ft = fine_tune_end_task(&ckpt.model, variant, lab, dj, j)?;
            let metrics = Metrics {
                accuracy: ft.accuracy,
                macro_f1: ft.macro_f1,
                mlm_loss: eval_mlm(&ckpt.model, variant, lab, dj, j)?,
            };
            log::info!(
                "{variant} after {} task {}: acc {:.4} mf1 {:.4} mlm {:.4}",
                names[i],
                names[j],
                metrics.accuracy,
                metrics.macro_f1,
                metrics.mlm_loss
            );
            matrix.set(i, j, metrics)?;
            row.push(CellOutcome { metrics, digest: ft.digest, predictions: ft.predictions });
        }
        cells.push(row);
        checkpoints.push(ckpt);
    }
    Ok(SequenceOutcome { variant, order: names, checkpoints, matrix, cells, log })
}
