use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clplugin::{TAU_MIN, THETA};
use crate::error::{Error, Result};
use crate::model::TransformerConfig;

/// Model sizes, optimiser settings and step budgets for one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub attention_plugin: usize,
    pub ffn_plugin: usize,

    pub pretrain_docs: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,

    pub post_lr: f64,
    pub post_batch: usize,
    pub post_epochs: usize,
    /// Upper bound on post-training steps per domain.
    pub max_post_steps: Option<usize>,

    pub ft_lr: f64,
    pub ft_batch: usize,
    pub ft_epochs: usize,

    /// Corpus documents per domain held out for MLM evaluation.
    pub eval_docs: usize,
    pub tau_min: f64,
    pub theta: f64,
}

impl TrainConfig {
    /// Full-scale settings: 1e-4 / 5e-5 learning rates, batches of 48 and
    /// 20, one post-training epoch and 20 fine-tuning epochs, plugin widths
    /// 512 and 768 over a 768-wide 12-layer encoder.
    pub fn paper() -> Self {
        TrainConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ffn: 3072,
            max_seq_len: crate::model::REFERENCE_MAX_LEN,
            attention_plugin: 512,
            ffn_plugin: 768,
            pretrain_docs: 0,
            pretrain_steps: 0,
            pretrain_batch: 48,
            pretrain_lr: 1e-4,
            post_lr: 1e-4,
            post_batch: 48,
            post_epochs: 1,
            max_post_steps: None,
            ft_lr: 5e-5,
            ft_batch: 20,
            ft_epochs: 20,
            eval_docs: 0,
            tau_min: TAU_MIN,
            theta: THETA,
        }
    }

    /// Laptop reference: width 64, 2 layers, plugins at 2/3 and 1x width,
    /// about 2,000 post-training steps per domain. Learning rates are raised
    /// because the step budget is far smaller.
    pub fn desk() -> Self {
        TrainConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 128,
            max_seq_len: 64,
            attention_plugin: 43,
            ffn_plugin: 64,
            pretrain_docs: 4000,
            pretrain_steps: 1000,
            pretrain_batch: 16,
            pretrain_lr: 1e-3,
            post_lr: 3e-3,
            post_batch: 16,
            post_epochs: 20,
            max_post_steps: Some(2000),
            ft_lr: 3e-3,
            ft_batch: 20,
            ft_epochs: 20,
            eval_docs: 64,
            tau_min: TAU_MIN,
            theta: THETA,
        }
    }

    /// Seconds-scale settings for tests and smoke runs.
    pub fn smoke() -> Self {
        TrainConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            max_seq_len: 24,
            attention_plugin: 8,
            ffn_plugin: 16,
            pretrain_docs: 200,
            pretrain_steps: 40,
            pretrain_batch: 8,
            pretrain_lr: 3e-3,
            post_lr: 3e-3,
            post_batch: 8,
            post_epochs: 1,
            max_post_steps: Some(40),
            ft_lr: 3e-3,
            ft_batch: 20,
            ft_epochs: 3,
            eval_docs: 8,
            tau_min: TAU_MIN,
            theta: THETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
            ("attention_plugin", self.attention_plugin),
            ("ffn_plugin", self.ffn_plugin),
            ("pretrain_batch", self.pretrain_batch),
            ("post_batch", self.post_batch),
            ("post_epochs", self.post_epochs),
            ("ft_batch", self.ft_batch),
            ("ft_epochs", self.ft_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if self.max_post_steps == Some(0) {
            return Err(Error::contract("max_post_steps must be positive"));
        }
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("post_lr", self.post_lr), ("ft_lr", self.ft_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return Err(Error::contract(format!("tau_min {} outside (0, 1)", self.tau_min)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::contract(format!("theta {} outside (0, 1)", self.theta)));
        }
        self.transformer(usize::MAX).validate()
    }

    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_seq_len: self.max_seq_len,
        }
    }

    /// Post-training steps for a corpus of `docs` documents.
    pub fn post_steps(&self, docs: usize) -> usize {
        let full = self.post_epochs * docs.div_ceil(self.post_batch);
        self.max_post_steps.map_or(full, |cap| full.min(cap)).max(1)
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}
